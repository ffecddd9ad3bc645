use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use sketchcage_core::anim::AnimError;
use sketchcage_core::cage::CageError;
use sketchcage_core::optim::OptimError;
use sketchcage_core::raster::RasterError;
use sketchcage_core::splat::SplatError;

/// Error body `{"error": kind, "message": text}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", format!("{what} `{id}` not found"))
    }

    pub fn invalid(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, kind, message)
    }

    pub fn conflict(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, kind, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.kind, "message": self.message}))).into_response()
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        Self::internal(e.to_string())
    }
}

impl From<SplatError> for ApiError {
    fn from(e: SplatError) -> Self {
        let kind = match &e {
            SplatError::EmptyCloud => "EmptyCloud",
            SplatError::MissingField(_) => "MissingField",
            SplatError::MalformedHeader(_) => "MalformedHeader",
            SplatError::Io(_) => return Self::internal(e.to_string()),
            _ => "InvalidPly",
        };
        Self::invalid(kind, e.to_string())
    }
}

impl From<RasterError> for ApiError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::ViewInvalid(m) => Self::invalid("ViewInvalid", m),
            RasterError::DimensionMismatch { .. } => Self::invalid("DimensionMismatch", e.to_string()),
            RasterError::Image(m) => Self::invalid("BadImage", m),
            RasterError::Io(e) => e.into(),
        }
    }
}

impl From<CageError> for ApiError {
    fn from(e: CageError) -> Self {
        Self::invalid("CageError", e.to_string())
    }
}

impl From<OptimError> for ApiError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::Raster(r) => r.into(),
            OptimError::Splat(s) => s.into(),
            OptimError::Cage(c) => c.into(),
            OptimError::Io(e) => e.into(),
            OptimError::InvalidConfig(m) => Self::invalid("InvalidConfig", m),
            OptimError::DimensionMismatch(..) => Self::invalid("DimensionMismatch", e.to_string()),
            other => Self::invalid("DeformError", other.to_string()),
        }
    }
}

impl From<AnimError> for ApiError {
    fn from(e: AnimError) -> Self {
        match e {
            AnimError::MismatchedCages(..) => Self::invalid("MismatchedCages", e.to_string()),
            AnimError::InsufficientKeyframes(_) => Self::invalid("InsufficientKeyframes", e.to_string()),
            AnimError::Io(e) => e.into(),
            other => Self::invalid("AnimationError", other.to_string()),
        }
    }
}

use sketchcage_core::anim::AnimError;
use sketchcage_core::cage::CageError;
use sketchcage_core::green::GreenError;
use sketchcage_core::guidance::GuidanceError;
use sketchcage_core::jacobian::JacobianError;
use sketchcage_core::optim::OptimError;
use sketchcage_core::raster::RasterError;
use sketchcage_core::splat::SplatError;

/// Failure reported as one `error kind=... message="..."` line.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    /// 2 for bad input, 1 for failures while running.
    pub code: i32,
}

impl CliError {
    pub fn input(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            code: 2,
        }
    }

    pub fn runtime(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            code: 1,
        }
    }

    pub fn line(&self) -> String {
        let msg = self.message.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("error kind={} message=\"{}\"", self.kind, msg)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime("Io", e.to_string())
    }
}

impl From<SplatError> for CliError {
    fn from(e: SplatError) -> Self {
        let kind = match &e {
            SplatError::MissingField(_) => "MissingField",
            SplatError::MalformedHeader(_) => "MalformedHeader",
            SplatError::EmptyCloud => "EmptyCloud",
            SplatError::NormalizationFailure(_) => "NormalizationFailure",
            SplatError::NotSpd(_) => "NotSpd",
            SplatError::Io(_) => return Self::runtime("Io", e.to_string()),
        };
        Self::input(kind, e.to_string())
    }
}

impl From<CageError> for CliError {
    fn from(e: CageError) -> Self {
        let kind = match &e {
            CageError::DegenerateInput(_) => "DegenerateInput",
            CageError::ResolutionOutOfRange(_) => "ResolutionOutOfRange",
            CageError::OffsetTooSmall { .. } => "OffsetTooSmall",
            CageError::EmptyLevelSet => "EmptyLevelSet",
            CageError::NonManifoldOutput(_) => "NonManifoldOutput",
            CageError::DecimationStalled { .. } => "DecimationStalled",
            CageError::PointOutsideCage(_) => "PointOutsideCage",
            CageError::Obj(_) => "BadObj",
            CageError::Io(_) => return Self::runtime("Io", e.to_string()),
        };
        Self::input(kind, e.to_string())
    }
}

impl From<GreenError> for CliError {
    fn from(e: GreenError) -> Self {
        let kind = match &e {
            GreenError::PointOutsideCage(_) => "PointOutsideCage",
            GreenError::NearBoundary(_) => "NearBoundary",
            GreenError::ConnectivityMismatch { .. } => "ConnectivityMismatch",
            _ => return Self::runtime("CoordinateCache", e.to_string()),
        };
        Self::input(kind, e.to_string())
    }
}

impl From<JacobianError> for CliError {
    fn from(e: JacobianError) -> Self {
        let kind = match &e {
            JacobianError::DegenerateRotation(_) => "DegenerateRotation",
            JacobianError::SingularSystem(_) => "SingularSystem",
            JacobianError::SolveFailure(_) => "SolveFailure",
            JacobianError::LengthMismatch { .. } => "LengthMismatch",
            JacobianError::Checkpoint(_) => "Checkpoint",
            JacobianError::Io(_) => "Io",
        };
        Self::runtime(kind, e.to_string())
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::ViewInvalid(m) => Self::input("ViewInvalid", m),
            RasterError::DimensionMismatch { .. } => Self::input("DimensionMismatch", e.to_string()),
            RasterError::Image(m) => Self::input("BadImage", m),
            RasterError::Io(e) => e.into(),
        }
    }
}

impl From<GuidanceError> for CliError {
    fn from(e: GuidanceError) -> Self {
        match e {
            GuidanceError::ServiceUnavailable(m) => Self::runtime("ServiceUnavailable", m),
            GuidanceError::BadResponse(m) => Self::runtime("BadResponse", m),
        }
    }
}

impl From<OptimError> for CliError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::DimensionMismatch(..) => Self::input("DimensionMismatch", e.to_string()),
            OptimError::NaNDetected { .. } => Self::runtime("NaNDetected", e.to_string()),
            OptimError::Cancelled(_) => Self::runtime("Cancelled", e.to_string()),
            OptimError::InvalidConfig(m) => Self::input("InvalidConfig", m),
            OptimError::Green(e) => e.into(),
            OptimError::Jacobian(e) => e.into(),
            OptimError::Raster(e) => e.into(),
            OptimError::Guidance(e) => e.into(),
            OptimError::Splat(e) => e.into(),
            OptimError::Cage(e) => e.into(),
            OptimError::Io(e) => e.into(),
        }
    }
}

impl From<AnimError> for CliError {
    fn from(e: AnimError) -> Self {
        match e {
            AnimError::MismatchedCages(..) => Self::input("MismatchedCages", e.to_string()),
            AnimError::InsufficientKeyframes(_) => Self::input("InsufficientKeyframes", e.to_string()),
            AnimError::BadTimes => Self::input("BadTimes", e.to_string()),
            AnimError::BadTiming { .. } => Self::input("BadTiming", e.to_string()),
            AnimError::Jacobian(e) => e.into(),
            AnimError::Raster(e) => e.into(),
            AnimError::Splat(e) => e.into(),
            AnimError::Green(e) => e.into(),
            AnimError::Io(e) => e.into(),
            AnimError::Manifest(e) => Self::runtime("Manifest", e.to_string()),
        }
    }
}

pub mod splat;
pub mod cage;
pub mod green;
pub mod jacobian;
pub mod deform;
pub mod raster;
pub mod guidance;
pub mod optim;
pub mod bench;
pub mod anim;
pub mod pipeline;

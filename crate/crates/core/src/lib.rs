pub mod cohort;
pub mod export;
pub mod flow;
pub mod forward;
pub mod inverse;
pub mod linalg;
pub mod mesh;
pub mod optim;
pub mod profile;
pub mod transport;

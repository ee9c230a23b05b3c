pub mod autodiff;
pub mod datapipe;
pub mod ensemble;
pub mod eval;
pub mod heads;
pub mod pipeline;
pub mod tensor;
pub mod toy;

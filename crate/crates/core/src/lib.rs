pub mod clinical;
pub mod data;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod training;

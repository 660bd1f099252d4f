pub(crate) mod basic;
pub mod conv;
pub(crate) mod linalg;
pub(crate) mod norm;

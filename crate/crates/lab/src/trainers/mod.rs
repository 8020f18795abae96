//! Training loops for the three policy families.

pub mod mnist;
pub mod tabular;
pub mod token;

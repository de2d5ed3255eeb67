pub mod autodiff;
pub mod graph;
pub mod model;
pub mod eval;
pub mod trainer;

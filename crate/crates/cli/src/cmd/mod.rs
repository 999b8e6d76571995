pub mod eval;
pub mod gradcheck;
pub mod longtail;
pub mod matrix;
pub mod probe;
pub mod train;

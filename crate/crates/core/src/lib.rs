pub mod diffcore;
pub mod eval;
pub mod gobl;
pub mod losses;
pub mod model;
pub mod synthdata;

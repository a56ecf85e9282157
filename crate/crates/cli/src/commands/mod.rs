pub mod eval;
pub mod gendata;
pub mod report;
pub mod score;
pub mod train;
pub mod verify;

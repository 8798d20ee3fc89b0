pub mod ablate;
pub mod analyze;
pub mod params;
pub mod train;

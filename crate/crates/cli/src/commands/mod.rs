pub mod bench;
pub mod gradcheck;
pub mod params;
pub mod train;

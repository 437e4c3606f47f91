pub mod bench;
pub mod dist;
pub mod gen;
pub mod mds;
pub mod pdd;
pub mod predict;
pub mod train;

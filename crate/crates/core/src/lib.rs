pub mod datakit;
pub mod imageio;
pub mod mathcore;
pub mod netzoo;
pub mod losses;
pub mod evalkit;
pub mod engine;
pub mod harness;

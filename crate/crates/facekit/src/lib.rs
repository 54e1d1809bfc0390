pub mod cascade;
pub mod detect;
pub mod image;
pub mod integral;
pub mod linalg;
pub mod train;

pub mod im2col;
pub mod layers;
pub mod params;

pub mod data;
pub mod model;
pub mod numeric;
pub mod training;

pub mod ablate;
pub mod evaluate;
pub mod extract;
pub mod features;
pub mod simulate;
pub mod train;

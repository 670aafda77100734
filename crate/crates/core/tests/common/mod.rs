pub mod cli;
pub mod grad;
pub mod props;

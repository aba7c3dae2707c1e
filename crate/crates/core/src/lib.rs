pub mod cli;
pub mod design;
pub mod gblup;
pub mod error;
pub mod geno;
pub mod gwas;
pub mod linalg;
pub mod herit;
pub mod io;
pub mod reml;
pub mod sim;

pub use error::{Error, Result};

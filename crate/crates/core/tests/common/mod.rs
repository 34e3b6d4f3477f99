#![allow(dead_code)]
pub mod gls_oracle;
pub mod quadrature;
pub mod stats;

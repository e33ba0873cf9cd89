//! Adaptive finite element Kohn-Sham solver where orbital groups live on
//! separate meshes sharing one hierarchical geometry tree.

pub mod adapt;
pub mod dense;
pub mod error;
pub mod fespace;
pub mod geometry;
pub mod hartree;
pub mod hgt;
pub mod io;
pub mod ks;
pub mod lobpcg;
pub mod par;
pub mod quadrature;
pub mod radial;
pub mod scf;
pub mod sparse;
pub mod split;
pub mod xc;

pub use error::{Error, Result};

//! Isometry invariants of periodic point sets.
//!
//! A periodic crystal is modelled as a lattice basis plus a finite motif of
//! points in fractional coordinates. This crate computes the pointwise
//! distance distribution (PDD) of such a set, compares PDDs with an exact
//! earth mover's distance, embeds distance matrices with classical
//! multidimensional scaling, and ships a small deterministic set transformer
//! that consumes weighted PDD rows directly.
//!
//! ```
//! use pddkit::{cif, metric, pdd};
//!
//! let text = "\
//! data_salt
//! _cell_length_a 4.0
//! _cell_length_b 4.0
//! _cell_length_c 4.0
//! _cell_angle_alpha 90
//! _cell_angle_beta 90
//! _cell_angle_gamma 90
//! loop_
//! _atom_site_label
//! _atom_site_type_symbol
//! _atom_site_fract_x
//! _atom_site_fract_y
//! _atom_site_fract_z
//! Na1 Na 0 0 0
//! Cl1 Cl 0.5 0.5 0.5
//! ";
//! let doc = cif::parse_cif(text)?;
//! let set = cif::to_periodic_set(&doc)?;
//! let p = pdd::pdd(&set, 8, 1e-4, true)?;
//! assert_eq!(metric::emd(&p, &p.clone())?.cost, 0.0);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod cif;
pub mod geometry;
pub mod mds;
pub mod metric;
pub mod pdd;
pub mod pst;

pub use geometry::{Isometry, LatticeBasis, Motif, PeriodicSet};
pub use metric::TransportPlan;
pub use pdd::Pdd;

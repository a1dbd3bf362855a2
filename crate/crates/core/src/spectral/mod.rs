//! Trigonometric polynomials on the flat torus and the divergence-free noise basis.

mod basis;
mod eval;
mod point;
mod poly;
mod vector;

pub use basis::{check_structure, check_structure_fields, NoiseBasis, NoiseMode, Parity, StructureReport};
pub use eval::{Cx, FourierTable, PolyEval, VectorEval};
pub use point::{torus_distance, wrap_angle, TorusPoint};
pub use poly::{TrigPoly, WaveVector};
pub use vector::VectorTrigPoly;
pub(crate) use basis::Fnv;

/// `n × n` uniform grid `(2πa/n, 2πb/n)`, row-major in `a`.
///
/// The average over this grid integrates every trigonometric polynomial of
/// degree below `n` exactly against the normalized measure.
pub fn uniform_grid(side: usize) -> alloc::vec::Vec<TorusPoint> {
    let h = crate::TAU / side as f64;
    let mut pts = alloc::vec::Vec::with_capacity(side * side);
    for a in 0..side {
        for b in 0..side {
            pts.push(TorusPoint::new(a as f64 * h, b as f64 * h));
        }
    }
    pts
}

//! Deterministic synthetic dataset generators.
//!
//! All fields are analytic closed forms, so ground truth is exact at any
//! query point; that is what makes the discretization studies meaningful.
//! Generators are pure functions of config + seed.

mod airfoil;
mod broadband;
mod wing;

pub use airfoil::{gen_airfoil_2d, Airfoil2D, Airfoil2DCfg};
pub use broadband::{energy_above_band, gen_broadband_1d, power_spectrum, Broadband1D, Broadband1DCfg};
pub use wing::{gen_wing_3d, Wing3D, Wing3DCfg, WingShapeParams};

use crate::data::{Container, DataError};
use crate::tensor::Tensor;
use std::path::Path;

pub(crate) fn write_field(
    dir: &Path,
    rel: &str,
    field: &Tensor,
) -> Result<(), DataError> {
    let mut c = Container::new();
    c.push_tensor("field", field)?;
    c.write(dir.join(rel))
}

pub(crate) fn write_points_mesh(
    dir: &Path,
    rel: &str,
    points: &Tensor,
) -> Result<(), DataError> {
    let mut c = Container::new();
    c.push_tensor("vertices", points)?;
    c.write(dir.join(rel))
}

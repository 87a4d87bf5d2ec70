//! Converting between rotation representations and measuring geodesic distance.
//!
//! ```bash
//! cargo run --release --example rotations
//! ```

use std::f64::consts::FRAC_PI_2;

use gid::rotmath::{chordal_mean, geodesic_angle_deg, slerp, AxisAngle, RotationMatrix, UnitQuaternion};
use nalgebra::Vector3;

fn main() -> gid::Result<()> {
    let aa = AxisAngle::new(0.0, 0.0, FRAC_PI_2);
    let r = aa.to_matrix();
    let q = r.to_quat();
    println!("axis-angle {:?}", aa.vector());
    println!("matrix rows {:?}", r.to_row_major());
    println!("quaternion {:?}", q.to_array());
    println!("back to axis-angle {:?}", q.to_axis_angle().vector());

    let d = geodesic_angle_deg(&RotationMatrix::identity(), &r);
    println!("geodesic(identity, 90° about z) = {d:.9}°");

    let a = UnitQuaternion::identity();
    let b = UnitQuaternion::from_axis_angle(Vector3::x(), 1.0)?;
    let mid = slerp(&a, &b, 0.5);
    println!("slerp halfway angle = {:.6} rad", mid.angle());

    let samples: Vec<UnitQuaternion> = [-0.02, 0.0, 0.02]
        .iter()
        .map(|&t| UnitQuaternion::from_axis_angle(Vector3::y(), 0.3 + t))
        .collect::<gid::Result<_>>()?;
    println!("chordal mean angle = {:.6} rad", chordal_mean(&samples)?.angle());
    Ok(())
}

#![allow(dead_code)]

use lidarfuse_core::geom::axis_angle_matrix;
use lidarfuse_core::{Point3, PointCloud, RigidTransform};
use nalgebra::Vector3;
use rand::Rng;

pub fn grid_plane(x0: f64, x1: f64, y0: f64, y1: f64, z: f64, step: f64) -> Vec<Point3> {
    let mut out = Vec::new();
    let mut x = x0;
    while x <= x1 + 1e-9 {
        let mut y = y0;
        while y <= y1 + 1e-9 {
            out.push(Point3::new(x, y, z));
            y += step;
        }
        x += step;
    }
    out
}

/// Surface samples of an axis-aligned box standing on z = 0 (no bottom face).
pub fn box_surface(center: Point3, size: Vector3<f64>, step: f64) -> Vec<Point3> {
    let h = size / 2.0;
    let (lo, hi) = (center - h, center + h);
    let mut out = Vec::new();
    let n = |a: f64, b: f64| ((b - a) / step).round().max(1.0) as usize;
    let (nx, ny, nz) = (n(lo.x, hi.x), n(lo.y, hi.y), n(0.0, hi.z));
    for i in 0..=nx {
        for j in 0..=ny {
            let x = lo.x + (hi.x - lo.x) * i as f64 / nx as f64;
            let y = lo.y + (hi.y - lo.y) * j as f64 / ny as f64;
            out.push(Point3::new(x, y, hi.z));
        }
    }
    for k in 0..nz {
        let z = hi.z * k as f64 / nz as f64;
        for i in 0..=nx {
            let x = lo.x + (hi.x - lo.x) * i as f64 / nx as f64;
            out.push(Point3::new(x, lo.y, z));
            out.push(Point3::new(x, hi.y, z));
        }
        for j in 1..ny {
            let y = lo.y + (hi.y - lo.y) * j as f64 / ny as f64;
            out.push(Point3::new(lo.x, y, z));
            out.push(Point3::new(hi.x, y, z));
        }
    }
    out
}

pub fn box_corners(center: Point3, size: Vector3<f64>) -> Vec<Point3> {
    let h = size / 2.0;
    let mut out = Vec::new();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            out.push(Point3::new(center.x + sx * h.x, center.y + sy * h.y, center.z + h.z));
            out.push(Point3::new(center.x + sx * h.x, center.y + sy * h.y, 0.0));
        }
    }
    out
}

pub fn random_transform(rng: &mut impl Rng, max_t: f64) -> RigidTransform {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let t = Vector3::new(rng.gen_range(-max_t..max_t), rng.gen_range(-max_t..max_t), rng.gen_range(-max_t..max_t));
    RigidTransform::new(axis_angle_matrix(&axis, rng.gen_range(-3.0..3.0)), t)
}

pub fn cloud(points: Vec<Point3>) -> PointCloud {
    PointCloud::new(points, 0, 0.0)
}

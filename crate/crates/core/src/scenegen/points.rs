use super::{color_rgb, SceneObject};
use crate::error::{Error, Result};
use crate::nn::{Rng, Tensor};

/// Per-channel color noise.
const COLOR_SIGMA: f64 = 0.03;

/// Samples `n` points on the box surface as rows `[x, y, z, r, g, b]`.
/// Faces are picked in proportion to their area; positions get Gaussian
/// jitter of `0.01 * min(size)`.
pub fn sample_points(obj: &SceneObject, n: usize) -> Result<Tensor> {
    if n < 8 {
        return Err(Error::Config(format!("need at least 8 points per object, got {n}")));
    }
    let base = color_rgb(&obj.color).unwrap_or([0.5, 0.5, 0.5]);
    let [sx, sy, sz] = obj.size;
    let sigma = 0.01 * sx.min(sy).min(sz);
    // Faces normal to x, y, z, each appearing twice.
    let areas = [sy * sz, sx * sz, sx * sy];
    let total = 2.0 * areas.iter().sum::<f64>();
    let mut rng = Rng::derive(obj.point_seed, n as u64);
    let mut data = Vec::with_capacity(n * 6);
    for _ in 0..n {
        let mut pick = rng.uniform() * total;
        let mut axis = 2;
        for (a, &area) in areas.iter().enumerate() {
            if pick < 2.0 * area {
                axis = a;
                break;
            }
            pick -= 2.0 * area;
        }
        let side = if rng.bernoulli(0.5) { 0.5 } else { -0.5 };
        let mut local = [rng.uniform() - 0.5, rng.uniform() - 0.5, rng.uniform() - 0.5];
        local[axis] = side;
        for d in 0..3 {
            let v = obj.center[d] + local[d] * obj.size[d] + sigma * rng.normal();
            data.push(v as f32);
        }
        for c in base {
            data.push((c as f64 + COLOR_SIGMA * rng.normal()).clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::matrix(n, 6, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj() -> SceneObject {
        SceneObject {
            id: 0,
            label: "cabinet".into(),
            center: [1.0, 2.0, 0.6],
            size: [0.8, 0.5, 1.2],
            color: "blue".into(),
            point_seed: 99,
        }
    }

    #[test]
    fn rejects_tiny_sets() {
        assert!(sample_points(&obj(), 7).is_err());
    }

    #[test]
    fn deterministic() {
        assert_eq!(sample_points(&obj(), 64).unwrap(), sample_points(&obj(), 64).unwrap());
    }

    #[test]
    fn inside_inflated_box_and_centered() {
        let o = obj();
        let sigma = 0.01 * 0.5;
        let pts = sample_points(&o, 1024).unwrap();
        let mut mean = [0.0f64; 3];
        for r in 0..1024 {
            let row = pts.row(r);
            for d in 0..3 {
                let off = (row[d] as f64 - o.center[d]).abs();
                assert!(off <= o.size[d] / 2.0 + 6.0 * sigma + 1e-6);
                mean[d] += row[d] as f64 / 1024.0;
            }
            assert!(row[3..].iter().all(|c| (0.0..=1.0).contains(c)));
        }
        for d in 0..3 {
            assert!((mean[d] - o.center[d]).abs() < 0.05);
        }
    }
}

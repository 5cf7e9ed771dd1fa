//! Circular-mean readout turning per-group-position scores into a rotation.

use crate::group::{xi_from_vector, Angle, READOUT_EPS};

/// Result of reading out one score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    /// Softmax weights over the K positions.
    pub probs: Vec<f64>,
    /// Weighted mean of the position unit vectors.
    pub vector: [f64; 2],
    /// Angle of `vector`, or zero when the readout is degenerate.
    pub angle: Angle,
    /// The scores cancel out and no direction is defined.
    pub degenerate: bool,
}

impl Readout {
    pub fn norm(&self) -> f64 {
        self.vector[0].hypot(self.vector[1])
    }

    /// d(angle in degrees)/d(vector). Zero for degenerate readouts.
    pub fn angle_gradient(&self) -> [f64; 2] {
        if self.degenerate {
            return [0.0; 2];
        }
        let [v1, v2] = self.vector;
        let n2 = v1 * v1 + v2 * v2;
        let k = 180.0 / std::f64::consts::PI / n2;
        [-v2 * k, v1 * k]
    }

    /// Maps a gradient with respect to `vector` back onto the scores.
    pub fn backward(&self, dv: [f64; 2]) -> Vec<f64> {
        let k = self.probs.len();
        let proj: Vec<f64> = (0..k)
            .map(|r| {
                let (s, c) = position_angle(r, k).sin_cos();
                dv[0] * c + dv[1] * s
            })
            .collect();
        let mean: f64 = self.probs.iter().zip(&proj).map(|(p, d)| p * d).sum();
        self.probs.iter().zip(&proj).map(|(p, d)| p * (d - mean)).collect()
    }
}

fn position_angle(r: usize, k: usize) -> f64 {
    (360.0 * r as f64 / k as f64).to_radians()
}

/// Softmax over `scores`, then the probability-weighted mean of the unit
/// vectors at angles 360·r/K.
pub fn circular_readout(scores: &[f32]) -> Readout {
    let k = scores.len();
    let max = scores.iter().map(|&s| s as f64).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut vector = [0.0; 2];
    for (r, p) in probs.iter().enumerate() {
        let (s, c) = position_angle(r, k).sin_cos();
        vector[0] += p * c;
        vector[1] += p * s;
    }
    let degenerate = !(vector[0].hypot(vector[1]) > READOUT_EPS);
    let angle = xi_from_vector(vector[0], vector[1]).map_or(Angle::ZERO, |g| g.angle());
    Readout {
        probs,
        vector,
        angle,
        degenerate,
    }
}

/// Smooth distance of the readout direction to the identity, 1 − cos ψ.
/// Degenerate readouts get the maximal value 2 and no gradient.
/// Returns the value and its gradient with respect to the vector.
pub fn identity_penalty(readout: &Readout) -> (f64, [f64; 2]) {
    if readout.degenerate {
        return (2.0, [0.0; 2]);
    }
    let [v1, v2] = readout.vector;
    let n = readout.norm();
    let n3 = n * n * n;
    (1.0 - v1 / n, [-v2 * v2 / n3, v1 * v2 / n3])
}

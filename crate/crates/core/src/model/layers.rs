//! Building blocks of the entangled network, each expressed on a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Tape, Tensor, Var};

/// Weight and optional bias of one affine map.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: Var,
    pub bias: Option<Var>,
}

/// Pools a `C x R x Co` map to `C` and maps it to `m x node_dim` vertex
/// features with `weight: (m * node_dim) x C`.
pub fn reshape_in(tape: &mut Tape, x_map: Var, map: Affine, m: usize, node_dim: usize) -> Result<Var> {
    let u = tape.global_avg_pool(x_map)?;
    let c = tape.shape(u)[0];
    let w_shape = tape.shape(map.weight).to_vec();
    if w_shape != [m * node_dim, c] {
        return Err(Error::dim("reshape_in", &w_shape, &[m * node_dim, c]));
    }
    let u = tape.reshape(u, &[c, 1])?;
    let h = tape.matmul(map.weight, u)?;
    let h = tape.reshape(h, &[m * node_dim])?;
    let h = match map.bias {
        Some(b) => tape.add_bias(h, b, 0)?,
        None => h,
    };
    tape.reshape(h, &[m, node_dim])
}

/// `act(P H W + b)`.
pub fn gcn_layer(tape: &mut Tape, h: Var, p: Var, map: Affine, act: Activation) -> Result<Var> {
    let ph = tape.matmul(p, h)?;
    let z = tape.matmul(ph, map.weight)?;
    let z = match map.bias {
        Some(b) => tape.add_bias(z, b, 1)?,
        None => z,
    };
    Ok(tape.activation(z, act))
}

/// `f F_sq`, a bias-free linear map from `m x w` to `m x d`.
pub fn squeeze(tape: &mut Tape, f: Var, f_sq: Var) -> Result<Var> {
    tape.matmul(f, f_sq)
}

/// Vertex mean of the squeezed rows, a length-`d` vector.
pub fn srf_pool(tape: &mut Tape, f: Var, f_sq: Var) -> Result<Var> {
    let s = squeeze(tape, f, f_sq)?;
    let (m, d) = (tape.shape(s)[0], tape.shape(s)[1]);
    let avg = tape.constant(Tensor::full(&[1, m], 1.0 / m as f64));
    let pooled = tape.matmul(avg, s)?;
    tape.reshape(pooled, &[d])
}

/// `sigmoid(W_out^T f + b) ⊗ x_map`, returning `(x_tilde, gate)`.
pub fn gate_feedback(tape: &mut Tape, x_map: Var, f: Var, w_out: Affine) -> Result<(Var, Var)> {
    let xs = tape.shape(x_map).to_vec();
    let fs = tape.shape(f).to_vec();
    if xs.len() != 3 || fs.len() != 2 || fs[1] != xs[1] * xs[2] {
        return Err(Error::dim("gate_feedback", &xs, &fs));
    }
    let wt = tape.transpose(w_out.weight)?;
    let z = tape.matmul(wt, f)?;
    let z = match w_out.bias {
        Some(b) => tape.add_bias(z, b, 0)?,
        None => z,
    };
    let gate = tape.sigmoid(z);
    let gate = tape.reshape(gate, &xs)?;
    let x_tilde = tape.mul(gate, x_map)?;
    Ok((x_tilde, gate))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `theta ⋈ srf_1 ⋈ ... ⋈ srf_L`
    #[default]
    Concat,
    /// `theta ⋈ (srf_1 + ... + srf_L)`
    Sum,
    /// `theta` alone
    Off,
}

impl FusionMode {
    pub fn fused_width(self, visual: usize, blocks: usize, d: usize) -> usize {
        match self {
            FusionMode::Concat => visual + blocks * d,
            FusionMode::Sum => visual + d,
            FusionMode::Off => visual,
        }
    }
}

pub fn fuse_embedding(tape: &mut Tape, theta: Var, srfs: &[Var], mode: FusionMode) -> Result<Var> {
    if mode == FusionMode::Off {
        return Ok(theta);
    }
    if srfs.is_empty() {
        return Err(Error::Contract("SRF fusion requested with no GCN blocks".into()));
    }
    match mode {
        FusionMode::Concat => {
            let mut parts = Vec::with_capacity(srfs.len() + 1);
            parts.push(theta);
            parts.extend_from_slice(srfs);
            tape.concat(&parts, 0)
        }
        FusionMode::Sum => {
            let mut acc = srfs[0];
            for &s in &srfs[1..] {
                acc = tape.add(acc, s)?;
            }
            tape.concat(&[theta, acc], 0)
        }
        FusionMode::Off => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn reshape_in_zero_and_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[6, 1]));
        let h = reshape_in(&mut tape, x, Affine { weight: w, bias: None }, 3, 2).unwrap();
        assert_eq!(*tape.value(h), Tensor::zeros(&[3, 2]));
        let w = tape.constant(Tensor::ones(&[6, 1]));
        let h = reshape_in(&mut tape, x, Affine { weight: w, bias: None }, 3, 2).unwrap();
        assert_eq!(*tape.value(h), Tensor::ones(&[3, 2]));
        let bad = tape.constant(Tensor::ones(&[5, 1]));
        assert!(reshape_in(&mut tape, x, Affine { weight: bad, bias: None }, 3, 2).is_err());
    }

    #[test]
    fn gcn_layer_identity_and_hand_case() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[2, 2], &[2.0, 0.0, 0.0, 4.0]));
        let eye = tape.constant(Tensor::eye(2));
        let out = gcn_layer(&mut tape, h, eye, Affine { weight: eye, bias: None }, Activation::Identity).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
        let p = tape.constant(Tensor::full(&[2, 2], 0.5));
        let out = gcn_layer(&mut tape, h, p, Affine { weight: eye, bias: None }, Activation::Relu).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn squeeze_examples() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.0, 4.0]));
        let z = tape.constant(Tensor::zeros(&[2, 10]));
        let s = squeeze(&mut tape, f, z).unwrap();
        assert_eq!(*tape.value(s), Tensor::zeros(&[2, 10]));
        let eye = tape.constant(Tensor::eye(2));
        let s = squeeze(&mut tape, f, eye).unwrap();
        assert_eq!(tape.value(s), tape.value(f));
    }

    #[test]
    fn gate_examples() {
        let mut tape = Tape::new();
        let xm = tape.constant(t(&[1, 1, 2], &[3.0, -4.0]));
        let f = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w0 = tape.constant(Tensor::zeros(&[2, 1]));
        let (xt, gate) = gate_feedback(&mut tape, xm, f, Affine { weight: w0, bias: None }).unwrap();
        assert_eq!(tape.value(gate).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(xt).data(), &[1.5, -2.0]);

        let big = tape.constant(Tensor::full(&[2, 1], 100.0));
        let (xt, _) = gate_feedback(&mut tape, xm, f, Affine { weight: big, bias: None }).unwrap();
        assert!((tape.value(xt).data()[0] - 3.0).abs() < 1e-12);
        assert!((tape.value(xt).data()[1] + 4.0).abs() < 1e-12);

        let wrong = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(gate_feedback(&mut tape, xm, wrong, Affine { weight: w0, bias: None }).is_err());
    }

    #[test]
    fn srf_pool_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::eye(3));
        let same = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let p = srf_pool(&mut tape, same, eye).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0]);
        let opp = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, -2.0, -3.0]));
        let p = srf_pool(&mut tape, opp, eye).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fusion_widths() {
        let mut tape = Tape::new();
        let theta = tape.constant(Tensor::ones(&[512]));
        let srfs: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::ones(&[10]))).collect();
        let c = fuse_embedding(&mut tape, theta, &srfs, FusionMode::Concat).unwrap();
        assert_eq!(tape.shape(c), &[542]);
        assert_eq!(FusionMode::Concat.fused_width(512, 3, 10), 542);
        let s = fuse_embedding(&mut tape, theta, &srfs, FusionMode::Sum).unwrap();
        assert_eq!(tape.shape(s), &[522]);
        assert_eq!(tape.value(s).data()[512], 3.0);

        let one = fuse_embedding(&mut tape, theta, &srfs[..1], FusionMode::Concat).unwrap();
        let one_sum = fuse_embedding(&mut tape, theta, &srfs[..1], FusionMode::Sum).unwrap();
        assert_eq!(tape.value(one), tape.value(one_sum));

        let zeros: Vec<Var> = (0..2).map(|_| tape.constant(Tensor::zeros(&[10]))).collect();
        let z = fuse_embedding(&mut tape, theta, &zeros, FusionMode::Sum).unwrap();
        assert!(tape.value(z).data()[512..].iter().all(|&v| v == 0.0));

        assert!(matches!(
            fuse_embedding(&mut tape, theta, &[], FusionMode::Concat),
            Err(Error::Contract(_))
        ));
    }
}

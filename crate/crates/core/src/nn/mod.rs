//! Small dense-network machinery: a flat parameter bundle, batched forward and
//! reverse-mode passes over stacks of affine layers, and Adam.
//!
//! Every layer stores its weights row-major with shape `(out_dim, in_dim)`
//! followed by `out_dim` biases, so a bundle with layers `(i_k, o_k)` holds
//! exactly `Σ (i_k + 1) · o_k` values.

mod adam;
mod mlp;

use std::io::{BufRead, Write};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{invalid, shape, Error, Result};

pub use adam::{adam_step, AdamConfig, OptState};
pub use mlp::{grad, mlp_forward, Objective, SquaredErrorLoss, Stack, StackTape};

const PARAMS_MAGIC: &str = "robust-diffusion-params";
const PARAMS_FORMAT_VERSION: u32 = 1;

/// Element-wise nonlinearity applied after hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Flat parameter storage for a list of affine layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle {
    layer_shapes: Vec<(usize, usize)>,
    values: Vec<f64>,
    version: u64,
}

fn expected_len(shapes: &[(usize, usize)]) -> usize {
    shapes.iter().map(|&(i, o)| (i + 1) * o).sum()
}

fn validate_shapes(shapes: &[(usize, usize)]) -> Result<()> {
    if shapes.is_empty() {
        return Err(shape("a parameter bundle needs at least one layer"));
    }
    if let Some(k) = shapes.iter().position(|&(i, o)| i == 0 || o == 0) {
        return Err(shape(format!("layer {k} has a zero dimension")));
    }
    Ok(())
}

impl ParamBundle {
    pub fn zeros(layer_shapes: Vec<(usize, usize)>) -> Result<Self> {
        validate_shapes(&layer_shapes)?;
        let n = expected_len(&layer_shapes);
        Ok(Self {
            layer_shapes,
            values: vec![0.0; n],
            version: 0,
        })
    }

    /// Zero biases, weights uniform in `±sqrt(6 / (in + out))`.
    pub fn glorot<R: Rng + ?Sized>(layer_shapes: Vec<(usize, usize)>, rng: &mut R) -> Result<Self> {
        let mut bundle = Self::zeros(layer_shapes)?;
        for k in 0..bundle.layer_shapes.len() {
            let (i, o) = bundle.layer_shapes[k];
            let limit = (6.0 / (i + o) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            for w in bundle.weights_mut(k).iter_mut() {
                *w = dist.sample(rng);
            }
        }
        Ok(bundle)
    }

    pub fn from_values(layer_shapes: Vec<(usize, usize)>, values: Vec<f64>) -> Result<Self> {
        validate_shapes(&layer_shapes)?;
        let n = expected_len(&layer_shapes);
        if values.len() != n {
            return Err(shape(format!(
                "expected {n} parameter values for the given layers, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("parameter {index} is not finite")));
        }
        Ok(Self {
            layer_shapes,
            values,
            version: 0,
        })
    }

    pub fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.layer_shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_layers(&self) -> usize {
        self.layer_shapes.len()
    }

    /// Offset of layer `k`'s first weight in the flat array.
    pub fn layer_offset(&self, k: usize) -> usize {
        expected_len(&self.layer_shapes[..k])
    }

    /// Flat range covered by layers `first..first + count`.
    pub fn layer_range(&self, first: usize, count: usize) -> std::ops::Range<usize> {
        let start = self.layer_offset(first);
        start..start + expected_len(&self.layer_shapes[first..first + count])
    }

    pub fn weights(&self, k: usize) -> ArrayView2<'_, f64> {
        let (i, o) = self.layer_shapes[k];
        let off = self.layer_offset(k);
        ArrayView2::from_shape((o, i), &self.values[off..off + i * o]).expect("layer layout")
    }

    pub fn bias(&self, k: usize) -> ArrayView1<'_, f64> {
        let (i, o) = self.layer_shapes[k];
        let off = self.layer_offset(k) + i * o;
        ArrayView1::from(&self.values[off..off + o])
    }

    pub fn weights_mut(&mut self, k: usize) -> ArrayViewMut2<'_, f64> {
        let (i, o) = self.layer_shapes[k];
        let off = self.layer_offset(k);
        self.version += 1;
        ArrayViewMut2::from_shape((o, i), &mut self.values[off..off + i * o]).expect("layer layout")
    }

    pub fn bias_mut(&mut self, k: usize) -> ArrayViewMut1<'_, f64> {
        let (i, o) = self.layer_shapes[k];
        let off = self.layer_offset(k) + i * o;
        self.version += 1;
        ArrayViewMut1::from(&mut self.values[off..off + o])
    }

    /// Mutable access to the raw values; bumps the version counter.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    /// Writes the versioned checkpoint format: a header line, one `in out`
    /// line per layer, then every value as a little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{PARAMS_MAGIC} v{PARAMS_FORMAT_VERSION}")?;
        writeln!(w, "layers {} version {}", self.layer_shapes.len(), self.version)?;
        for &(i, o) in &self.layer_shapes {
            writeln!(w, "{i} {o}")?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let header = read_line(&mut r)?;
        let expected = format!("{PARAMS_MAGIC} v{PARAMS_FORMAT_VERSION}");
        if header != expected {
            return Err(Error::Parse(format!("unexpected parameter header `{header}`")));
        }
        let counts = read_line(&mut r)?;
        let fields: Vec<&str> = counts.split_whitespace().collect();
        let (n_layers, version) = match fields.as_slice() {
            ["layers", n, "version", v] => (parse_num::<usize>(n)?, parse_num::<u64>(v)?),
            _ => return Err(Error::Parse(format!("bad layer count line `{counts}`"))),
        };
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let line = read_line(&mut r)?;
            let mut it = line.split_whitespace();
            let (Some(i), Some(o), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Parse(format!("bad layer shape line `{line}`")));
            };
            shapes.push((parse_num(i)?, parse_num(o)?));
        }
        validate_shapes(&shapes)?;
        let n = expected_len(&shapes);
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let mut bundle = Self::from_values(shapes, values)?;
        bundle.version = version;
        Ok(bundle)
    }
}

pub(crate) fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Parse("unexpected end of file".into()));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

pub(crate) fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("cannot parse `{s}` as a number")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn value_count_matches_layer_shapes() {
        let b = ParamBundle::zeros(vec![(7, 16), (16, 16), (16, 2)]).unwrap();
        assert_eq!(b.len(), 8 * 16 + 17 * 16 + 17 * 2);
        assert_eq!(b.layer_offset(2), 8 * 16 + 17 * 16);
    }

    #[test]
    fn rejects_zero_dims_and_wrong_counts() {
        assert!(ParamBundle::zeros(vec![]).is_err());
        assert!(ParamBundle::zeros(vec![(3, 0)]).is_err());
        assert!(ParamBundle::from_values(vec![(1, 1)], vec![1.0]).is_err());
        assert!(ParamBundle::from_values(vec![(1, 1)], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn glorot_respects_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = ParamBundle::glorot(vec![(4, 6)], &mut rng).unwrap();
        let limit = (6.0f64 / 10.0).sqrt();
        assert!(b.weights(0).iter().all(|w| w.abs() <= limit));
        assert!(b.bias(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = ParamBundle::glorot(vec![(3, 5), (5, 2)], &mut rng).unwrap();
        b.values_mut()[0] = -0.0;
        b.values_mut()[1] = 1e-308;
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        let back = ParamBundle::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.layer_shapes(), b.layer_shapes());
        assert_eq!(back.version(), b.version());
        let bits = |p: &ParamBundle| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&b));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let b = ParamBundle::zeros(vec![(2, 2)]).unwrap();
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamBundle::read_from(buf.as_slice()).is_err());
    }
}

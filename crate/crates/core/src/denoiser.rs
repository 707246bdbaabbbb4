//! Conditional noise predictor `J(z_t; x, t)`: transformer-encoder blocks
//! that each add projections of the noisy tokens, the conditions and the
//! timestep embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ross_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Result, RossError};
use crate::nn::{LayerNorm, Linear, Mlp, SelfAttention};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Latent width; 0 means "take it from the tokenizer".
    pub d_lat: usize,
    pub use_self_attention: bool,
    pub timestep_embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            d_model: 128,
            n_heads: 4,
            d_lat: 0,
            use_self_attention: true,
            timestep_embed_dim: 128,
            mlp_ratio: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(RossError::config(format!(
                "denoiser d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.d_lat == 0 || self.mlp_ratio == 0 {
            return Err(RossError::config("denoiser n_blocks, d_lat and mlp_ratio must be positive"));
        }
        if self.timestep_embed_dim == 0 || !self.timestep_embed_dim.is_multiple_of(2) {
            return Err(RossError::config("timestep_embed_dim must be even and positive"));
        }
        Ok(())
    }
}

/// Raw sinusoidal features: `sin(t ω_i)` for the first half, `cos(t ω_i)`
/// for the second, with `ω_i = 10000^(-2i/dim)`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(RossError::config(format!("timestep embedding dim {dim} is odd")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 10000f64.powf(-(2.0 * i as f64) / dim as f64))
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t as f64 * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t as f64 * w).cos()));
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct DenoiserBlock {
    proj_in: Linear,
    proj_cond: Linear,
    proj_time: Linear,
    attn: Option<(LayerNorm, SelfAttention)>,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Denoiser<T: Scalar> {
    pub config: DenoiserConfig,
    pub d_cond: usize,
    pub store: ParamStore<T>,
    time_mlp: Mlp,
    blocks: Vec<DenoiserBlock>,
    ln_out: LayerNorm,
    head: Linear,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, d_cond: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let time_mlp = Mlp::new(&mut store, "time", config.timestep_embed_dim, d, d, &mut rng);
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let name = format!("block{i}");
                let d_in = if i == 0 { config.d_lat } else { d };
                DenoiserBlock {
                    proj_in: Linear::new(&mut store, &format!("{name}.proj_in"), d_in, d, &mut rng),
                    proj_cond: Linear::new(&mut store, &format!("{name}.proj_cond"), d_cond, d, &mut rng),
                    proj_time: Linear::new(&mut store, &format!("{name}.proj_time"), d, d, &mut rng),
                    attn: config.use_self_attention.then(|| {
                        (
                            LayerNorm::new(&mut store, &format!("{name}.ln_attn"), d),
                            SelfAttention::new(&mut store, &format!("{name}.attn"), d, config.n_heads, &mut rng),
                        )
                    }),
                    ln_mlp: LayerNorm::new(&mut store, &format!("{name}.ln_mlp"), d),
                    mlp: Mlp::new(&mut store, &format!("{name}.mlp"), d, d * config.mlp_ratio, d, &mut rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(&mut store, "ln_out", d);
        let head = Linear::new(&mut store, "head", d, config.d_lat, &mut rng);
        Ok(Self {
            config,
            d_cond,
            store,
            time_mlp,
            blocks,
            ln_out,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count("")
    }

    /// Timestep embedding after the MLP, `[B, d_model]`.
    pub fn timestep_embedding(&self, g: &mut Graph<T>, t: &[usize]) -> Result<Var> {
        let dim = self.config.timestep_embed_dim;
        let mut data = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            data.extend(sinusoidal_embedding(ti, dim)?.into_iter().map(T::lit));
        }
        let raw = g.constant(Tensor::from_vec(&[t.len(), dim], data)?);
        self.time_mlp.forward(g, &self.store, raw)
    }

    /// `eps_hat` with the shape of `z_t`.
    pub fn forward(&self, g: &mut Graph<T>, z_t: Var, cond: Var, t: &[usize]) -> Result<Var> {
        let zs = g.shape(z_t).to_vec();
        let cs = g.shape(cond).to_vec();
        if zs.len() != 3 || zs[2] != self.config.d_lat {
            return Err(RossError::shape(format!(
                "z_t {zs:?} but denoiser d_lat is {}",
                self.config.d_lat
            )));
        }
        if cs.len() != 3 || cs[0] != zs[0] || cs[1] != zs[1] || cs[2] != self.d_cond {
            return Err(RossError::shape(format!("cond {cs:?} does not match z_t {zs:?}")));
        }
        if t.len() != zs[0] {
            return Err(RossError::shape(format!("{} timesteps for batch {}", t.len(), zs[0])));
        }
        if let Some(&bad) = t.iter().find(|&&x| x == 0) {
            return Err(RossError::TimestepOutOfRange { t: bad, max: usize::MAX });
        }
        let temb = self.timestep_embedding(g, t)?;
        let mut h = z_t;
        for (i, block) in self.blocks.iter().enumerate() {
            let a = block.proj_in.forward(g, &self.store, h)?;
            let c = block.proj_cond.forward(g, &self.store, cond)?;
            let tt = block.proj_time.forward(g, &self.store, temb)?;
            let mut u = g.add(a, c)?;
            u = g.add_per_item(u, tt)?;
            h = if i == 0 { u } else { g.add(h, u)? };
            if let Some((ln, attn)) = &block.attn {
                let n = ln.forward(g, &self.store, h)?;
                let (o, _) = attn.forward(g, &self.store, n, false, None)?;
                h = g.add(h, o)?;
            }
            let n = block.ln_mlp.forward(g, &self.store, h)?;
            let m = block.mlp.forward(g, &self.store, n)?;
            h = g.add(h, m)?;
        }
        let h = self.ln_out.forward(g, &self.store, h)?;
        self.head.forward(g, &self.store, h)
    }

    /// Plain-tensor prediction.
    pub fn predict_values(&self, z_t: &Tensor<T>, cond: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let c = g.constant(cond.clone());
        let out = self.forward(&mut g, z, c, t)?;
        Ok(g.value(out).clone())
    }
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    fn predict(&self, g: &mut Graph<T>, z_t: Var, cond: Var, t: &[usize]) -> Result<Var> {
        self.forward(g, z_t, cond, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(sa: bool) -> DenoiserConfig {
        DenoiserConfig {
            n_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_lat: 3,
            use_self_attention: sa,
            timestep_embed_dim: 6,
            mlp_ratio: 2,
        }
    }

    fn inputs(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[2, 5, 3], 1.0, &mut rng),
            Tensor::randn(&[2, 5, 4], 1.0, &mut rng),
        )
    }

    #[test]
    fn raw_sinusoid_at_zero() {
        let e = sinusoidal_embedding(0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert!(sinusoidal_embedding(3, 7).is_err());
        assert_eq!(sinusoidal_embedding(17, 16).unwrap(), sinusoidal_embedding(17, 16).unwrap());
    }

    #[test]
    fn shape_contract_and_errors() {
        let d = Denoiser::<f32>::new(
            DenoiserConfig {
                d_lat: 8,
                ..DenoiserConfig::default()
            },
            128,
            0,
        )
        .unwrap();
        let z = Tensor::zeros(&[2, 64, 8]);
        let c = Tensor::zeros(&[2, 64, 128]);
        assert_eq!(d.predict_values(&z, &c, &[1, 1000]).unwrap().shape(), &[2, 64, 8]);
        assert!(d.predict_values(&z, &Tensor::zeros(&[2, 63, 128]), &[1, 2]).is_err());
        assert!(matches!(
            d.predict_values(&z, &c, &[0, 3]),
            Err(RossError::TimestepOutOfRange { .. })
        ));
        assert!(DenoiserConfig::default().validate().is_err());
    }

    #[test]
    fn ablation_has_fewer_parameters() {
        let with = Denoiser::<f32>::new(micro(true), 4, 0).unwrap();
        let without = Denoiser::<f32>::new(micro(false), 4, 0).unwrap();
        assert!(without.parameter_count() < with.parameter_count());
    }

    #[test]
    fn deterministic_for_a_seed() {
        let (z, c) = inputs(1);
        let a = Denoiser::<f64>::new(micro(true), 4, 9).unwrap();
        let b = Denoiser::<f64>::new(micro(true), 4, 9).unwrap();
        assert_eq!(
            a.predict_values(&z, &c, &[3, 40]).unwrap(),
            b.predict_values(&z, &c, &[3, 40]).unwrap()
        );
    }
}

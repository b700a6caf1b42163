//! The unified feature field: a residual 3D CNN refines the fused input
//! volume, trilinear interpolation makes it continuous, and three two-headed
//! MLPs decode color, semantic feature and TSDF with log-variances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{assemble_input, encode_image, Encoder, FusionState};
use crate::geom::{trilinear_stencil_clamped, GridSpec, Vec3};
use crate::scene::{mix_seed, FrameObservation};
use crate::volume::VoxelVolume;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;
const N_BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Image feature width `C_E`.
    pub encoder_channels: usize,
    /// Refined feature width `C_Ψ`.
    pub refine_channels: usize,
    pub hidden: usize,
    /// Semantic feature width `C_F`.
    pub feature_dim: usize,
    /// Observation count at which the normalized count channel reaches 1.
    pub count_cap: f64,
    /// Initial Laplace scale in meters.
    pub beta_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: 8,
            refine_channels: 16,
            hidden: 64,
            feature_dim: 16,
            count_cap: 64.0,
            beta_init: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels == 0 || self.refine_channels == 0 || self.hidden == 0 {
            return Err(Error::domain("network widths must be positive"));
        }
        if self.feature_dim < 2 {
            return Err(Error::domain("feature_dim must be >= 2"));
        }
        if !(self.count_cap > 0.0) || !(self.beta_init > 0.0) {
            return Err(Error::domain("count_cap and beta_init must be positive"));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.encoder_channels + 3
    }

    pub fn encoder(&self) -> Encoder {
        Encoder {
            channels: self.encoder_channels,
        }
    }

    pub fn head_width(&self, head: Head) -> usize {
        match head {
            Head::Vis => 3,
            Head::Sem => self.feature_dim,
            Head::Geo => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Vis,
    Sem,
    Geo,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Vis, Head::Sem, Head::Geo];

    pub fn name(self) -> &'static str {
        match self {
            Head::Vis => "vis",
            Head::Sem => "sem",
            Head::Geo => "geo",
        }
    }
}

pub const LOG_BETA: &str = "log_beta";

fn conv_names(layer: &str) -> (String, String) {
    (format!("ref.{layer}.w"), format!("ref.{layer}.b"))
}

fn dec_name(head: Head, part: &str) -> String {
    format!("dec.{}.{part}", head.name())
}

/// Dropout applied after every refinement convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
}

/// Encoder, refinement network, decoders and β as one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = config.encoder().init(&mut rng);
        let (cin, cp, h) = (config.input_channels(), config.refine_channels, config.hidden);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let (w, b) = conv_names("in");
        params.insert(w, Tensor::randn(&[cp, cin, 3, 3, 3], he(27 * cin), &mut rng));
        params.insert(b, Tensor::zeros(&[cp]));
        for k in 0..N_BLOCKS {
            let (w, b) = conv_names(&format!("r{k}.a"));
            params.insert(w, Tensor::randn(&[cp, cp, 3, 3, 3], he(27 * cp), &mut rng));
            params.insert(b, Tensor::zeros(&[cp]));
            // residual branches start as the identity
            let (w, b) = conv_names(&format!("r{k}.b"));
            params.insert(w, Tensor::zeros(&[cp, cp, 3, 3, 3]));
            params.insert(b, Tensor::zeros(&[cp]));
        }
        for head in Head::ALL {
            let m = config.head_width(head);
            params.insert(dec_name(head, "l1.w"), Tensor::randn(&[cp, h], he(cp), &mut rng));
            params.insert(dec_name(head, "l1.b"), Tensor::zeros(&[h]));
            params.insert(dec_name(head, "l2.w"), Tensor::randn(&[h, h], he(h), &mut rng));
            params.insert(dec_name(head, "l2.b"), Tensor::zeros(&[h]));
            params.insert(dec_name(head, "mean.w"), Tensor::randn(&[h, m], (1.0 / h as f64).sqrt(), &mut rng));
            params.insert(dec_name(head, "mean.b"), Tensor::zeros(&[m]));
            params.insert(dec_name(head, "logvar.w"), Tensor::randn(&[h, 1], 0.1 / (h as f64).sqrt(), &mut rng));
            params.insert(dec_name(head, "logvar.b"), Tensor::zeros(&[1]));
        }
        params.insert(LOG_BETA, Tensor::scalar(config.beta_init.ln()));
        Ok(Self { config, params })
    }

    /// Rebuilds a model from a checkpoint, checking every expected tensor.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::init(config, 0)?;
        for (name, t) in &reference.params.tensors {
            match params.get(name) {
                Some(p) if p.shape == t.shape => {}
                Some(p) => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("{name} has shape {:?}, expected {:?}", p.shape, t.shape),
                    ))
                }
                None => return Err(Error::format("checkpoint", format!("missing tensor {name}"))),
            }
        }
        if params.tensors.len() != reference.params.tensors.len() {
            return Err(Error::format("checkpoint", "unexpected extra tensors"));
        }
        Ok(Self { config, params })
    }

    pub fn beta(&self) -> f64 {
        self.params.get(LOG_BETA).expect("log_beta present").item().exp()
    }

    /// Pixel-major features of every frame.
    pub fn encode_frames(&self, frames: &[FrameObservation]) -> Result<Vec<Vec<f64>>> {
        let enc = self.config.encoder();
        frames
            .iter()
            .map(|f| encode_image(&enc, &self.params, &f.rgb, f.intr.width, f.intr.height))
            .collect()
    }

    /// Encodes and fuses `frames` into a fresh state.
    pub fn fuse(&self, grid: GridSpec, trunc: f64, frames: &[FrameObservation]) -> Result<FusionState> {
        let maps = self.encode_frames(frames)?;
        crate::fusion::fuse_frames(grid, trunc, frames, &maps, self.config.encoder_channels)
    }

    /// The field of a fusion state.
    pub fn field(&self, state: &FusionState) -> Result<UnifiedField> {
        let input = assemble_input(state, self.config.count_cap);
        self.field_from_input(&input, state.trunc, None)
    }

    pub fn field_from_input(&self, input: &VoxelVolume, trunc: f64, dropout: Option<DropoutSpec>) -> Result<UnifiedField> {
        let refined = self.refine(input, dropout)?;
        let mut decoders = ParamStore::new();
        for (k, t) in &self.params.tensors {
            if k.starts_with("dec.") || k == LOG_BETA {
                decoders.insert(k.clone(), t.clone());
            }
        }
        Ok(UnifiedField {
            refined,
            decoders,
            config: self.config,
            trunc,
        })
    }

    /// Refined volume `V^Ψ` (voxel-major, `C_Ψ` channels).
    pub fn refine(&self, input: &VoxelVolume, dropout: Option<DropoutSpec>) -> Result<VoxelVolume> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = input_tensor(&mut g, input, self.config.input_channels())?;
        let h = refine_graph(&self.config, &mut g, &p, x, dropout)?;
        let cp = self.config.refine_channels;
        VoxelVolume::from_channel_first(input.grid, cp, &g.value(h).data)
    }
}

/// Channel-first constant of a voxel-major network input.
pub fn input_tensor(g: &mut Graph, input: &VoxelVolume, channels: usize) -> Result<Var> {
    if input.channels != channels {
        return Err(Error::domain(format!(
            "refinement expects {channels} input channels, got {}",
            input.channels
        )));
    }
    let d = input.grid.dims;
    Ok(g.constant(Tensor::new(
        vec![channels, d[0], d[1], d[2]],
        input.to_channel_first(),
    )?))
}

/// `Ψ`: input conv then residual blocks `h += conv_b(relu(conv_a(h)))`.
pub fn refine_graph(cfg: &ModelConfig, g: &mut Graph, p: &Bound, x: Var, dropout: Option<DropoutSpec>) -> Result<Var> {
    if g.shape(x).len() != 4 || g.shape(x)[0] != cfg.input_channels() {
        return Err(Error::domain(format!(
            "refinement expects [{}, X, Y, Z] input, got {:?}",
            cfg.input_channels(),
            g.shape(x)
        )));
    }
    let mut conv_index = 0u64;
    let mut conv = |g: &mut Graph, h: Var, layer: &str| -> Result<Var> {
        let (w, b) = conv_names(layer);
        let y = g.conv3d(h, p.get(&w), p.get(&b))?;
        conv_index += 1;
        match dropout {
            Some(d) if d.rate > 0.0 => g.dropout(y, d.rate, mix_seed(d.seed, conv_index)),
            _ => Ok(y),
        }
    };
    let mut h = conv(g, x, "in")?;
    for k in 0..N_BLOCKS {
        let a = conv(g, h, &format!("r{k}.a"))?;
        let a = g.relu(a);
        let b = conv(g, a, &format!("r{k}.b"))?;
        h = g.add(h, b)?;
    }
    Ok(h)
}

/// Decoder `head` on features `[P, C_Ψ]`: mean `[P, m]` and clamped logvar `[P, 1]`.
pub fn decode_graph(cfg: &ModelConfig, g: &mut Graph, p: &Bound, feats: Var, head: Head) -> Result<(Var, Var)> {
    if g.shape(feats).len() != 2 || g.shape(feats)[1] != cfg.refine_channels {
        return Err(Error::shape("decode", format!("features {:?}", g.shape(feats))));
    }
    let lin = |g: &mut Graph, x: Var, part: &str| -> Result<Var> {
        let y = g.matmul(x, p.get(&dec_name(head, &format!("{part}.w"))))?;
        g.add_bias(y, p.get(&dec_name(head, &format!("{part}.b"))))
    };
    let h = lin(g, feats, "l1")?;
    let h = g.relu(h);
    let h = lin(g, h, "l2")?;
    let h = g.relu(h);
    let m = lin(g, h, "mean")?;
    let mean = match head {
        Head::Vis => g.sigmoid(m),
        Head::Sem => m,
        Head::Geo => g.tanh(m),
    };
    let u = lin(g, h, "logvar")?;
    let logvar = g.clamp(u, LOGVAR_MIN, LOGVAR_MAX);
    Ok((mean, logvar))
}

/// Decoded values at a batch of points.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
    pub width: usize,
}

impl Decoded {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.mean[i * self.width..(i + 1) * self.width]
    }
}

/// Refined feature volume plus decoder parameters; read-only after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedField {
    pub refined: VoxelVolume,
    pub decoders: ParamStore,
    pub config: ModelConfig,
    /// Truncation distance converting decoded TSDF values to meters.
    pub trunc: f64,
}

impl UnifiedField {
    pub fn grid(&self) -> &GridSpec {
        &self.refined.grid
    }

    pub fn beta(&self) -> f64 {
        self.decoders.get(LOG_BETA).expect("log_beta present").item().exp()
    }

    /// `Φ(x)`; points outside the interpolable region are clamped onto it and
    /// reported with `true`.
    pub fn query(&self, x: &Vec3) -> (Vec<f64>, bool) {
        let (st, clamped) = trilinear_stencil_clamped(self.grid(), x);
        (self.refined.apply_stencil(&st), clamped)
    }

    /// `[P, C_Ψ]` features at `xs` (clamped).
    pub fn query_many(&self, xs: &[Vec3]) -> Vec<f64> {
        let c = self.refined.channels;
        let mut out = Vec::with_capacity(xs.len() * c);
        for x in xs {
            out.extend(self.query(x).0);
        }
        out
    }

    pub fn decode(&self, x: &Vec3, head: Head) -> (Vec<f64>, f64) {
        let d = self.decode_many(std::slice::from_ref(x), head);
        (d.mean, d.logvar[0])
    }

    pub fn decode_many(&self, xs: &[Vec3], head: Head) -> Decoded {
        self.decode_features(self.query_many(xs), xs.len(), head)
    }

    /// Decodes precomputed `[n, C_Ψ]` features.
    pub fn decode_features(&self, feats: Vec<f64>, n: usize, head: Head) -> Decoded {
        let width = self.config.head_width(head);
        if n == 0 {
            return Decoded {
                mean: Vec::new(),
                logvar: Vec::new(),
                width,
            };
        }
        let mut g = Graph::new();
        let p = self.decoders.bind(&mut g, false);
        let f = g.constant(Tensor {
            shape: vec![n, self.config.refine_channels],
            data: feats,
        });
        let (m, u) = decode_graph(&self.config, &mut g, &p, f, head).expect("shapes fixed by construction");
        Decoded {
            mean: g.value(m).data.clone(),
            logvar: g.value(u).data.clone(),
            width,
        }
    }

    /// Every head at every voxel center, in linear voxel order.
    pub fn decode_voxel_centers(&self, head: Head) -> Decoded {
        let n = self.refined.n_voxels();
        self.decode_features(self.refined.data.clone(), n, head)
    }
}

/// Seed of MC-dropout pass `k`.
pub fn pass_seed(seed: u64, k: usize) -> u64 {
    mix_seed(seed, 0x6d63_0000 + k as u64)
}

/// Epistemic variance by MC dropout: `n_passes` refinement passes with dropout,
/// population variance of the mean head per query, averaged over channels.
pub fn mc_dropout_variance(
    model: &Model,
    input: &VoxelVolume,
    trunc: f64,
    xs: &[Vec3],
    head: Head,
    n_passes: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::domain("dropout rate must lie in (0, 1)"));
    }
    if n_passes < 2 {
        return Err(Error::domain("MC dropout needs at least two passes"));
    }
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    let mut width = 1;
    for k in 0..n_passes {
        let field = model.field_from_input(
            input,
            trunc,
            Some(DropoutSpec {
                rate,
                seed: pass_seed(seed, k),
            }),
        )?;
        let d = field.decode_many(xs, head);
        width = d.width;
        if sum.is_empty() {
            sum = vec![0.0; d.mean.len()];
            sq = vec![0.0; d.mean.len()];
        }
        for (i, v) in d.mean.iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let n = n_passes as f64;
    Ok((0..xs.len())
        .map(|q| {
            (0..width)
                .map(|c| {
                    let i = q * width + c;
                    let mean = sum[i] / n;
                    (sq[i] / n - mean * mean).max(0.0)
                })
                .sum::<f64>()
                / width as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_sampled;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            encoder_channels: 2,
            refine_channels: 3,
            hidden: 6,
            feature_dim: 4,
            count_cap: 10.0,
            beta_init: 0.1,
        }
    }

    fn random_input(cfg: &ModelConfig, dims: [usize; 3], seed: u64) -> VoxelVolume {
        let grid = GridSpec::new([0.0; 3], 0.1, dims).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.n_voxels() * cfg.input_channels();
        VoxelVolume::from_data(grid, cfg.input_channels(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_input_gives_bias_pattern() {
        let cfg = small_config();
        let mut m = Model::init(cfg, 3).unwrap();
        let bias = vec![0.3, -0.1, 0.7];
        m.params.insert("ref.in.b", Tensor::vector(bias.clone()));
        let grid = GridSpec::new([0.0; 3], 0.1, [3, 4, 5]).unwrap();
        let zero = VoxelVolume::zeros(grid, cfg.input_channels());
        let out = m.refine(&zero, None).unwrap();
        assert_eq!(out.grid, grid);
        for l in 0..grid.n_voxels() {
            assert_eq!(out.at(l), bias.as_slice());
        }
    }

    #[test]
    fn refine_preserves_dims_and_checks_channels() {
        let cfg = small_config();
        let m = Model::init(cfg, 1).unwrap();
        for dims in [[3, 3, 3], [4, 5, 3], [6, 3, 4]] {
            let v = random_input(&cfg, dims, 2);
            let out = m.refine(&v, None).unwrap();
            assert_eq!(out.grid.dims, dims);
            assert_eq!(out.channels, cfg.refine_channels);
        }
        let bad = VoxelVolume::zeros(GridSpec::new([0.0; 3], 0.1, [3, 3, 3]).unwrap(), 2);
        assert!(matches!(m.refine(&bad, None), Err(Error::Domain(_))));
    }

    fn perturbed(cfg: ModelConfig, seed: u64) -> Model {
        // move the zero-initialized residual convs away from zero
        let mut m = Model::init(cfg, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
        for (k, t) in m.params.tensors.iter_mut() {
            if k.ends_with(".b.w") || k.ends_with(".b") {
                t.data.iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2));
            }
        }
        m
    }

    #[test]
    fn refine_input_gradient_matches_finite_differences() {
        let cfg = small_config();
        let m = perturbed(cfg, 5);
        let input = random_input(&cfg, [3, 3, 4], 6);
        let x = Tensor::new(vec![cfg.input_channels(), 3, 3, 4], input.to_channel_first()).unwrap();
        let e = grad_check_sampled(
            |g, v| {
                let p = m.params.bind(g, false);
                let h = refine_graph(&cfg, g, &p, v[0], None)?;
                g.sum(h, None)
            },
            &[x],
            1e-5,
            40,
            0,
        )
        .unwrap();
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn query_contract() {
        let cfg = small_config();
        let m = perturbed(cfg, 2);
        let input = random_input(&cfg, [4, 4, 4], 1);
        let f = m.field_from_input(&input, 0.1, None).unwrap();
        let grid = *f.grid();
        let c = grid.voxel_center([1, 2, 1]);
        assert_eq!(f.query(&c).0, f.refined.voxel([1, 2, 1]));
        assert_eq!(f.query(&c), f.query(&c));
        let (_, flagged) = f.query(&Vec3::new(-1.0, 0.2, 0.2));
        assert!(flagged);
        // linear along an axis between adjacent centers
        let a = grid.voxel_center([1, 1, 1]);
        let b = grid.voxel_center([2, 1, 1]);
        let (fa, fb) = (f.query(&a).0, f.query(&b).0);
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let q = f.query(&(a + (b - a) * t)).0;
            for ch in 0..q.len() {
                assert!((q[ch] - (fa[ch] + t * (fb[ch] - fa[ch]))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn field_is_lipschitz_within_a_cell() {
        let cfg = small_config();
        let m = perturbed(cfg, 8);
        let f = m.field_from_input(&random_input(&cfg, [4, 4, 4], 8), 0.1, None).unwrap();
        let grid = *f.grid();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let corners: Vec<Vec<f64>> = (0..8)
            .map(|k| f.refined.voxel([1 + (k >> 2), 1 + ((k >> 1) & 1), 1 + (k & 1)]).to_vec())
            .collect();
        let mut spread: f64 = 0.0;
        for a in &corners {
            for b in &corners {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                spread = spread.max(d);
            }
        }
        let lip = 3.0 * spread / grid.voxel_size;
        let base = grid.voxel_center([1, 1, 1]);
        for _ in 0..200 {
            let p = base + Vec3::from_fn(|_, _| r.gen_range(0.0..grid.voxel_size));
            let q = base + Vec3::from_fn(|_, _| r.gen_range(0.0..grid.voxel_size));
            let (fp, fq) = (f.query(&p).0, f.query(&q).0);
            let d: f64 = fp.iter().zip(&fq).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d <= lip * (p - q).norm() + 1e-12);
        }
    }

    #[test]
    fn decode_ranges_and_zeroed_logvar() {
        let cfg = small_config();
        let mut m = perturbed(cfg, 4);
        // make the logvar heads huge so the clamp is exercised
        for head in Head::ALL {
            m.params
                .tensors
                .get_mut(&dec_name(head, "logvar.w"))
                .unwrap()
                .data
                .iter_mut()
                .for_each(|v| *v *= 500.0);
        }
        let f = m.field_from_input(&random_input(&cfg, [4, 4, 4], 9), 0.1, None).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Vec3> = (0..200).map(|_| Vec3::from_fn(|_, _| r.gen_range(-0.1..0.5))).collect();
        let vis = f.decode_many(&xs, Head::Vis);
        assert!(vis.mean.iter().all(|v| (0.0..=1.0).contains(v)));
        let geo = f.decode_many(&xs, Head::Geo);
        assert!(geo.mean.iter().all(|v| (-1.0..=1.0).contains(v)));
        for head in Head::ALL {
            let d = f.decode_many(&xs, head);
            assert!(d.logvar.iter().all(|u| (LOGVAR_MIN..=LOGVAR_MAX).contains(u)));
            assert!(d.logvar.iter().any(|&u| u == LOGVAR_MIN || u == LOGVAR_MAX));
        }
        // decode is a pure function of (field, x)
        assert_eq!(f.decode(&xs[3], Head::Sem), f.decode(&xs[3], Head::Sem));

        let mut z = m.clone();
        for head in Head::ALL {
            z.params.insert(dec_name(head, "logvar.w"), Tensor::zeros(&[cfg.hidden, 1]));
            z.params.insert(dec_name(head, "logvar.b"), Tensor::scalar(-1.25));
        }
        let f = z.field_from_input(&random_input(&cfg, [4, 4, 4], 9), 0.1, None).unwrap();
        for head in Head::ALL {
            assert!(f.decode_many(&xs, head).logvar.iter().all(|&u| u == -1.25));
        }
    }

    #[test]
    fn decoder_parameter_gradients() {
        let cfg = small_config();
        let m = perturbed(cfg, 6);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let feats = Tensor::randn(&[5, cfg.refine_channels], 1.0, &mut r);
        for head in Head::ALL {
            let names: Vec<String> = ["l1.w", "l1.b", "l2.w", "l2.b", "mean.w", "mean.b", "logvar.w", "logvar.b"]
                .iter()
                .map(|p| dec_name(head, p))
                .collect();
            let params: Vec<Tensor> = names.iter().map(|n| m.params.get(n).unwrap().clone()).collect();
            let e = grad_check_sampled(
                |g, v| {
                    let bound = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
                    let f = g.constant(feats.clone());
                    let (mean, u) = decode_graph(&cfg, g, &bound, f, head)?;
                    let sq = g.mul(mean, mean)?;
                    let a = g.sum(sq, None)?;
                    let b = g.sum(u, None)?;
                    g.add(a, b)
                },
                &params,
                1e-5,
                30,
                1,
            )
            .unwrap();
            assert!(e < 1e-5, "{head:?}: {e}");
        }
    }

    #[test]
    fn mc_dropout_contract() {
        let cfg = small_config();
        let m = perturbed(cfg, 7);
        let input = random_input(&cfg, [4, 4, 4], 3);
        let grid = input.grid;
        let xs: Vec<Vec3> = (0..4).map(|i| grid.voxel_center([i, 1, 2])).collect();
        let tiny = mc_dropout_variance(&m, &input, 0.1, &xs, Head::Geo, 5, 1e-9, 0).unwrap();
        assert!(tiny.iter().all(|&v| v < 1e-12));
        let a = mc_dropout_variance(&m, &input, 0.1, &xs, Head::Vis, 4, 0.3, 11).unwrap();
        let b = mc_dropout_variance(&m, &input, 0.1, &xs, Head::Vis, 4, 0.3, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v > 0.0));
        assert!(mc_dropout_variance(&m, &input, 0.1, &xs, Head::Vis, 1, 0.3, 11).is_err());

        // two passes by hand with the same per-pass seeds
        let v2 = mc_dropout_variance(&m, &input, 0.1, &xs, Head::Vis, 2, 0.4, 5).unwrap();
        let pass = |k| {
            m.field_from_input(&input, 0.1, Some(DropoutSpec { rate: 0.4, seed: pass_seed(5, k) }))
                .unwrap()
                .decode_many(&xs, Head::Vis)
        };
        let (p0, p1) = (pass(0), pass(1));
        for q in 0..xs.len() {
            let want: f64 = (0..3).map(|c| ((p0.row(q)[c] - p1.row(q)[c]) / 2.0).powi(2)).sum::<f64>() / 3.0;
            assert!((v2[q] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_shapes_are_validated() {
        let cfg = small_config();
        let m = Model::init(cfg, 0).unwrap();
        assert!(Model::from_params(cfg, m.params.clone()).is_ok());
        let mut bad = m.params.clone();
        bad.insert("ref.in.b", Tensor::zeros(&[7]));
        assert!(Model::from_params(cfg, bad).is_err());
        assert!((m.beta() - 0.1).abs() < 1e-15);
    }
}

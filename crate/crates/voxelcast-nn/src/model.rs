//! The neural rerendering models.
//!
//! Two variants share a backbone:
//!
//! * the base model encodes a colored voxel grid with strided 3D
//!   convolutions, collapses depth into channels with the projection
//!   reshape, fuses a light-position embedding, and decodes to an image;
//! * the plus variant additionally runs a small conv stack over the splat
//!   image, adds its output to the decoder's final feature map, and refines
//!   the sum with a three-level encoder-decoder with skip connections.
//!
//! All convolutions that feed a batchnorm omit their bias (the batchnorm
//! shift makes it redundant); heads and splat-stack convolutions keep
//! theirs.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use voxelcast_autodiff::tape::{BatchStats, Tape};
use voxelcast_autodiff::{AutodiffError, ParameterStore, Var};

use crate::NnError;

/// Architecture hyperparameters. The defaults (`desk`) train on one CPU
/// core; the same shape generalizes to larger grids by extending the stage
/// lists.
#[derive(Debug, Clone, PartialEq)]
pub struct NvrConfig {
    /// Input voxel grid dimensions (depth, height, width) — must be equal.
    pub voxel_dims: [usize; 3],
    /// Channels per voxel (RGB + occupancy).
    pub voxel_channels: usize,
    /// Output image side length (square images).
    pub image_size: usize,
    /// Channel widths of the strided 3D encoder stages (each halves every
    /// spatial dimension).
    pub encoder_channels: Vec<usize>,
    /// Channels after the 1×1 convolution that follows the projection
    /// reshape.
    pub projected_channels: usize,
    /// Channel widths of the stride-1 2D blocks after the projection.
    pub post_channels: Vec<usize>,
    /// Hidden width of the light embedding MLP.
    pub light_hidden: usize,
    /// Output width of the light embedding (tiled over the feature map).
    pub light_embedding_width: usize,
    /// Channel widths of the decoder stages (each doubles the resolution).
    pub decoder_channels: Vec<usize>,
    /// Channel width of the splat-processing conv stack (plus variant).
    pub spn_channels: usize,
    /// Encoder widths of the refinement encoder-decoder (plus variant).
    pub unet_channels: [usize; 3],
    /// Whether this is the plus variant (splat input + refinement net).
    pub plus: bool,
}

impl NvrConfig {
    /// Desk-scale configuration: 32³×4 voxels to 64² images.
    pub fn desk(plus: bool) -> NvrConfig {
        NvrConfig {
            voxel_dims: [32, 32, 32],
            voxel_channels: 4,
            image_size: 64,
            encoder_channels: vec![8, 16, 32],
            projected_channels: 64,
            post_channels: vec![64, 64],
            light_hidden: 32,
            light_embedding_width: 64,
            decoder_channels: vec![64, 32, 16, 16],
            spn_channels: 16,
            unet_channels: [16, 32, 64],
            plus,
        }
    }

    /// Spatial side length of the feature map where the voxel and light
    /// branches meet.
    pub fn base_resolution(&self) -> usize {
        self.voxel_dims[0] >> self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let d = self.voxel_dims;
        if d[0] == 0 || d[0] != d[1] || d[1] != d[2] {
            return Err(NnError::Config(format!("voxel dims must be equal and nonzero: {d:?}")));
        }
        if self.voxel_channels == 0 || self.encoder_channels.is_empty() {
            return Err(NnError::Config("empty encoder".into()));
        }
        if d[0] % (1 << self.encoder_channels.len()) != 0 {
            return Err(NnError::Config(format!(
                "voxel dim {} not divisible by 2^{} encoder stages",
                d[0],
                self.encoder_channels.len()
            )));
        }
        let base = self.base_resolution();
        if base == 0 {
            return Err(NnError::Config("encoder collapses the grid to nothing".into()));
        }
        let out = base << self.decoder_channels.len();
        if out != self.image_size {
            return Err(NnError::Config(format!(
                "decoder reaches {out}, configured image size is {}",
                self.image_size
            )));
        }
        if self.decoder_channels.is_empty() || self.post_channels.is_empty() {
            return Err(NnError::Config("decoder and post stages must be nonempty".into()));
        }
        let widths = [
            self.projected_channels,
            self.light_hidden,
            self.light_embedding_width,
            self.spn_channels,
        ];
        if widths.iter().chain(&self.unet_channels).any(|&w| w == 0) {
            return Err(NnError::Config("all channel widths must be nonzero".into()));
        }
        Ok(())
    }
}

/// Result of a forward pass: the image variable, the parameter bindings
/// (name → tape variable, for reading gradients back), and the batch
/// statistics of every batchnorm (training mode only).
pub struct Forward {
    pub image: Var,
    pub params: BTreeMap<String, Var>,
    pub bn_stats: Vec<(String, BatchStats<f32>)>,
}

#[derive(Debug, Clone)]
pub struct NvrModel {
    pub config: NvrConfig,
}

impl NvrModel {
    pub fn new(config: NvrConfig) -> Result<NvrModel, NnError> {
        config.validate()?;
        Ok(NvrModel { config })
    }

    /// Create a freshly initialized parameter store. Weights are He-uniform
    /// in the fan-in, biases zero, batchnorm scale one / shift zero with
    /// zero-mean unit-variance running statistics.
    pub fn init_params(&self, seed: u64) -> ParameterStore {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), store: ParameterStore::new() };
        let c = &self.config;
        let mut cin = c.voxel_channels;
        for (i, &cout) in c.encoder_channels.iter().enumerate() {
            init.conv_bn(&format!("enc3d.{i}"), cout, cin, 3, 3);
            cin = cout;
        }
        let proj_in = cin * c.base_resolution();
        init.conv_bn("proj", c.projected_channels, proj_in, 1, 2);
        cin = c.projected_channels;
        for (i, &cout) in c.post_channels.iter().enumerate() {
            init.conv_bn(&format!("post2d.{i}"), cout, cin, 3, 2);
            cin = cout;
        }
        init.dense("light.0", c.light_hidden, 3);
        init.dense("light.1", c.light_embedding_width, c.light_hidden);
        cin = *c.post_channels.last().unwrap() + c.light_embedding_width;
        for (i, &cout) in c.decoder_channels.iter().enumerate() {
            init.conv_bn(&format!("dec.{i}"), cout, cin, 3, 2);
            cin = cout;
        }
        let feat = cin;
        if c.plus {
            init.conv_bias("spn.0", c.spn_channels, 3, 3);
            init.conv_bias("spn.1", c.spn_channels, c.spn_channels, 3);
            init.conv_bias("spn.2", c.spn_channels, c.spn_channels, 3);
            init.conv_bias("spn.3", feat, c.spn_channels, 3);
            let [u0, u1, u2] = c.unet_channels;
            init.conv_bn("unet.e0", u0, feat, 3, 2);
            init.conv_bn("unet.e1", u1, u0, 3, 2);
            init.conv_bn("unet.e2", u2, u1, 3, 2);
            init.conv_bn("unet.d1", u1, u2 + u1, 3, 2);
            init.conv_bn("unet.d2", u0, u1 + u0, 3, 2);
            init.conv_bias("unet.head", 3, u0, 3);
        } else {
            init.conv_bias("head", 3, feat, 3);
        }
        init.store
    }

    /// Run the model. `voxels` is `[n, channels, d, h, w]`, `light` is
    /// `[n, 3]`, `splat` is `[n, 3, image, image]` and is required exactly
    /// when the config is the plus variant. In training mode batchnorms use
    /// batch statistics and report them; in eval mode they use the running
    /// statistics stored alongside the weights.
    pub fn forward(
        &self,
        t: &mut Tape<f32>,
        store: &ParameterStore,
        voxels: Var,
        light: Var,
        splat: Option<Var>,
        training: bool,
    ) -> Result<Forward, NnError> {
        let c = &self.config;
        let vs = t.shape(voxels).to_vec();
        let expect = [vs.first().copied().unwrap_or(0), c.voxel_channels, c.voxel_dims[0], c.voxel_dims[1], c.voxel_dims[2]];
        if vs.len() != 5 || vs[1..] != expect[1..] || vs[0] == 0 {
            return Err(NnError::Config(format!("voxel tensor {vs:?}, expected {expect:?}")));
        }
        let n = vs[0];
        if t.shape(light) != [n, 3] {
            return Err(NnError::Config(format!(
                "light tensor {:?}, expected [{n}, 3]",
                t.shape(light)
            )));
        }
        match (c.plus, splat) {
            (true, None) => {
                return Err(NnError::Config("plus variant requires a splat image".into()))
            }
            (false, Some(_)) => {
                return Err(NnError::Config("base variant takes no splat image".into()))
            }
            (true, Some(s)) if t.shape(s) != [n, 3, c.image_size, c.image_size] => {
                return Err(NnError::Config(format!(
                    "splat tensor {:?}, expected [{n}, 3, {}, {}]",
                    t.shape(s),
                    c.image_size,
                    c.image_size
                )));
            }
            _ => {}
        }

        let mut ctx = Ctx { t, store, training, params: BTreeMap::new(), bn_stats: Vec::new() };

        // Voxel branch.
        let mut v = voxels;
        for i in 0..c.encoder_channels.len() {
            v = ctx.conv3d_block(&format!("enc3d.{i}"), v, 2, 1)?;
        }
        v = ctx.t.reshape_projection(v)?;
        v = ctx.conv2d_block("proj", v, 1, 0)?;
        for i in 0..c.post_channels.len() {
            v = ctx.conv2d_block(&format!("post2d.{i}"), v, 1, 1)?;
        }

        // Light branch.
        let mut l = ctx.dense_relu("light.0", light)?;
        l = ctx.dense_relu("light.1", l)?;
        let base = c.base_resolution();
        let l = ctx.t.tile(l, base, base)?;

        // Fuse and decode.
        let mut f = ctx.t.concat(&[v, l], 1)?;
        for i in 0..c.decoder_channels.len() {
            f = ctx.t.upsample_nearest2(f)?;
            f = ctx.conv2d_block(&format!("dec.{i}"), f, 1, 1)?;
        }

        let image = if c.plus {
            let s = splat.expect("checked above");
            let mut sp = ctx.conv2d_bias("spn.0", s, 1, 1)?;
            sp = ctx.t.relu(sp);
            sp = ctx.conv2d_bias("spn.1", sp, 1, 1)?;
            sp = ctx.t.relu(sp);
            sp = ctx.conv2d_bias("spn.2", sp, 1, 1)?;
            sp = ctx.t.relu(sp);
            sp = ctx.conv2d_bias("spn.3", sp, 1, 1)?;
            let fused = ctx.t.add(f, sp)?;

            let e0 = ctx.conv2d_block("unet.e0", fused, 1, 1)?;
            let p1 = ctx.t.avgpool2(e0)?;
            let e1 = ctx.conv2d_block("unet.e1", p1, 1, 1)?;
            let p2 = ctx.t.avgpool2(e1)?;
            let e2 = ctx.conv2d_block("unet.e2", p2, 1, 1)?;
            let u1 = ctx.t.upsample_nearest2(e2)?;
            let c1 = ctx.t.concat(&[u1, e1], 1)?;
            let d1 = ctx.conv2d_block("unet.d1", c1, 1, 1)?;
            let u2 = ctx.t.upsample_nearest2(d1)?;
            let c2 = ctx.t.concat(&[u2, e0], 1)?;
            let d2 = ctx.conv2d_block("unet.d2", c2, 1, 1)?;
            let logits = ctx.conv2d_bias("unet.head", d2, 1, 1)?;
            ctx.t.sigmoid(logits)
        } else {
            let logits = ctx.conv2d_bias("head", f, 1, 1)?;
            ctx.t.sigmoid(logits)
        };

        Ok(Forward { image, params: ctx.params, bn_stats: ctx.bn_stats })
    }
}

/// Parameter initializer: fixed creation order + seeded draws make the
/// initial store a pure function of the seed.
struct Init {
    rng: ChaCha8Rng,
    store: ParameterStore,
}

impl Init {
    fn weight(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<f32> = (0..len).map(|_| self.rng.gen_range(-bound..bound) as f32).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Convolution (2D or 3D by `spatial_rank`) without bias, followed by a
    /// batchnorm.
    fn conv_bn(&mut self, name: &str, cout: usize, cin: usize, k: usize, spatial_rank: usize) {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat(k).take(spatial_rank));
        let fan_in = cin * k.pow(spatial_rank as u32);
        let w = self.weight(&shape, fan_in);
        self.store.insert(&format!("{name}.conv.w"), w);
        self.store.insert(&format!("{name}.bn.g"), ArrayD::ones(IxDyn(&[cout])));
        self.store.insert(&format!("{name}.bn.b"), ArrayD::zeros(IxDyn(&[cout])));
        self.store.insert_buffer(&format!("{name}.bn.mean"), ArrayD::zeros(IxDyn(&[cout])));
        self.store.insert_buffer(&format!("{name}.bn.var"), ArrayD::ones(IxDyn(&[cout])));
    }

    /// 2D convolution with bias and no batchnorm.
    fn conv_bias(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let w = self.weight(&[cout, cin, k, k], cin * k * k);
        self.store.insert(&format!("{name}.w"), w);
        self.store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
    }

    fn dense(&mut self, name: &str, out: usize, inp: usize) {
        let w = self.weight(&[out, inp], inp);
        self.store.insert(&format!("{name}.w"), w);
        self.store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])));
    }
}

/// Per-forward bookkeeping: binds store entries onto the tape on first use
/// and collects batch statistics.
struct Ctx<'a> {
    t: &'a mut Tape<f32>,
    store: &'a ParameterStore,
    training: bool,
    params: BTreeMap<String, Var>,
    bn_stats: Vec<(String, BatchStats<f32>)>,
}

impl Ctx<'_> {
    fn p(&mut self, name: &str) -> Result<Var, AutodiffError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let values = self.store.get(name)?.clone();
        let v = self.t.param(values);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var, AutodiffError> {
        let g = self.p(&format!("{name}.g"))?;
        let b = self.p(&format!("{name}.b"))?;
        if self.training {
            let (y, stats) = self.t.batchnorm_train(x, g, b)?;
            self.bn_stats.push((name.to_string(), stats));
            Ok(y)
        } else {
            let mean = self.store.get(&format!("{name}.mean"))?;
            let var = self.store.get(&format!("{name}.var"))?;
            self.t.batchnorm_eval(x, g, b, mean, var)
        }
    }

    fn conv2d_block(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let w = self.p(&format!("{name}.conv.w"))?;
        let y = self.t.conv2d(x, w, None, stride, pad)?;
        let y = self.bn(&format!("{name}.bn"), y)?;
        Ok(self.t.relu(y))
    }

    fn conv3d_block(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let w = self.p(&format!("{name}.conv.w"))?;
        let y = self.t.conv3d(x, w, None, stride, pad)?;
        let y = self.bn(&format!("{name}.bn"), y)?;
        Ok(self.t.relu(y))
    }

    fn conv2d_bias(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.t.conv2d(x, w, Some(b), stride, pad)
    }

    fn dense_relu(&mut self, name: &str, x: Var) -> Result<Var, AutodiffError> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.t.dense(x, w, b)?;
        Ok(self.t.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use voxelcast_autodiff::gradcheck::random_array;

    fn random_inputs(
        t: &mut Tape<f32>,
        config: &NvrConfig,
        n: usize,
        seed: u64,
    ) -> (Var, Var, Option<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.voxel_dims;
        let vox = random_array(&mut rng, &[n, config.voxel_channels, d[0], d[1], d[2]], 0.0, 1.0)
            .mapv(|v| v as f32);
        let light = random_array(&mut rng, &[n, 3], -1.0, 1.0).mapv(|v| v as f32);
        let vox = t.constant(vox);
        let light = t.constant(light);
        let splat = if config.plus {
            let s = random_array(&mut rng, &[n, 3, config.image_size, config.image_size], 0.0, 1.0)
                .mapv(|v| v as f32);
            Some(t.constant(s))
        } else {
            None
        };
        (vox, light, splat)
    }

    #[test]
    fn desk_configs_validate_and_paper_scale_is_expressible() {
        NvrConfig::desk(false).validate().unwrap();
        NvrConfig::desk(true).validate().unwrap();
        let paper = NvrConfig {
            voxel_dims: [128, 128, 128],
            voxel_channels: 4,
            image_size: 256,
            encoder_channels: vec![8, 16, 32, 64, 128],
            projected_channels: 128,
            post_channels: vec![128, 128],
            light_hidden: 64,
            light_embedding_width: 128,
            decoder_channels: vec![128, 64, 64, 32, 32, 16],
            spn_channels: 32,
            unet_channels: [32, 64, 128],
            plus: true,
        };
        paper.validate().unwrap();
        assert!(NvrConfig { image_size: 32, ..NvrConfig::desk(false) }.validate().is_err());
        assert!(NvrConfig { voxel_dims: [32, 32, 16], ..NvrConfig::desk(false) }
            .validate()
            .is_err());
    }

    #[test]
    fn forward_produces_images_in_range() {
        for plus in [false, true] {
            let model = NvrModel::new(NvrConfig::desk(plus)).unwrap();
            let store = model.init_params(7);
            let mut t = Tape::<f32>::new();
            let (vox, light, splat) = random_inputs(&mut t, &model.config, 2, 11);
            let out = model.forward(&mut t, &store, vox, light, splat, false).unwrap();
            assert_eq!(t.shape(out.image), &[2, 3, 64, 64]);
            for &v in t.value(out.image).iter() {
                assert!((0.0..=1.0).contains(&v), "pixel {v} out of range");
            }
            assert!(out.bn_stats.is_empty(), "eval mode reports no batch stats");
        }
    }

    #[test]
    fn zero_voxels_make_the_output_depend_only_on_light() {
        let model = NvrModel::new(NvrConfig::desk(false)).unwrap();
        let store = model.init_params(7);
        let run = |light_val: [f32; 3]| {
            let mut t = Tape::<f32>::new();
            let d = model.config.voxel_dims;
            let vox = t.constant(ArrayD::zeros(IxDyn(&[1, 4, d[0], d[1], d[2]])));
            let light = t.constant(
                ArrayD::from_shape_vec(IxDyn(&[1, 3]), light_val.to_vec()).unwrap(),
            );
            let out = model.forward(&mut t, &store, vox, light, None, false).unwrap();
            t.value(out.image).clone()
        };
        let a = run([0.2, 2.7, -0.4]);
        let b = run([0.2, 2.7, -0.4]);
        assert_eq!(a, b, "identical inputs give identical images");
        let c = run([-1.2, 2.9, 1.1]);
        let diff: f32 = a.iter().zip(c.iter()).map(|(x, y)| (x - y).abs()).sum::<f32>()
            / a.len() as f32;
        assert!(diff > 0.0, "moving the light must change the image");
    }

    #[test]
    fn splat_is_required_exactly_for_the_plus_variant() {
        let base = NvrModel::new(NvrConfig::desk(false)).unwrap();
        let plus = NvrModel::new(NvrConfig::desk(true)).unwrap();
        let store_base = base.init_params(1);
        let store_plus = plus.init_params(1);

        let mut t = Tape::<f32>::new();
        let (vox, light, _) = random_inputs(&mut t, &base.config, 1, 2);
        let splat = t.constant(ArrayD::zeros(IxDyn(&[1, 3, 64, 64])));
        assert!(base.forward(&mut t, &store_base, vox, light, Some(splat), false).is_err());
        assert!(plus.forward(&mut t, &store_plus, vox, light, None, false).is_err());
        let bad = t.constant(ArrayD::zeros(IxDyn(&[1, 3, 32, 32])));
        assert!(plus.forward(&mut t, &store_plus, vox, light, Some(bad), false).is_err());
    }

    #[test]
    fn zeroed_splat_stack_makes_the_plus_output_ignore_the_splat() {
        let model = NvrModel::new(NvrConfig::desk(true)).unwrap();
        let mut store = model.init_params(3);
        for name in ["spn.0", "spn.1", "spn.2", "spn.3"] {
            for suffix in ["w", "b"] {
                let key = format!("{name}.{suffix}");
                let zeros = ArrayD::zeros(store.get(&key).unwrap().raw_dim());
                *store.get_mut(&key).unwrap() = zeros;
            }
        }
        let run = |seed: u64| {
            let mut t = Tape::<f32>::new();
            let (vox, light, _) = random_inputs(&mut t, &model.config, 1, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_array(&mut rng, &[1, 3, 64, 64], 0.0, 1.0).mapv(|v| v as f32);
            let s = t.constant(s);
            let out = model.forward(&mut t, &store, vox, light, Some(s), false).unwrap();
            t.value(out.image).clone()
        };
        assert_eq!(run(100), run(200), "with a silent splat stack, the splat cannot matter");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for plus in [false, true] {
            let model = NvrModel::new(NvrConfig::desk(plus)).unwrap();
            let store = model.init_params(9);
            let mut t = Tape::<f32>::new();
            let (vox, light, splat) = random_inputs(&mut t, &model.config, 2, 13);
            let out = model.forward(&mut t, &store, vox, light, splat, true).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let target = random_array(&mut rng, &[2, 3, 64, 64], 0.0, 1.0).mapv(|v| v as f32);
            let tv = t.constant(target);
            let loss = t.l1_loss(out.image, tv).unwrap();
            t.backward(loss).unwrap();
            for (name, var) in &out.params {
                let g = t.grad(*var).unwrap_or_else(|| panic!("no gradient for {name}"));
                assert!(
                    g.iter().any(|&v| v != 0.0),
                    "parameter {name} received an all-zero gradient"
                );
            }
            // Every trainable entry in the store was actually used.
            for name in store.trainable_names() {
                assert!(out.params.contains_key(name), "unused parameter {name}");
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use super::{pad_to_multiple, validate_params, Binder, Built, Mode, NormKind, ParamBuilder};
use crate::error::{Error, Result};
use crate::grid::{stack_images, ImageGrid, ProbMap};
use crate::nn::{Graph, ParamSet, Tensor, Var};

/// U-Net style two-class segmentor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentorSpec {
    /// Number of pooling stages; `0` gives a plain conv stack.
    pub depth: usize,
    pub base_channels: usize,
    pub convs_per_level: usize,
    pub skip_connections: bool,
    pub norm: NormKind,
}

impl Default for SegmentorSpec {
    fn default() -> Self {
        SegmentorSpec {
            depth: 4,
            base_channels: 32,
            convs_per_level: 2,
            skip_connections: true,
            norm: NormKind::Batch,
        }
    }
}

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug)]
pub struct Segmentor {
    spec: SegmentorSpec,
    template: ParamSet,
}

impl Segmentor {
    pub fn new(spec: SegmentorSpec) -> Result<Self> {
        if spec.base_channels == 0 || spec.convs_per_level == 0 {
            return Err(Error::InvalidConfig(
                "segmentor needs base_channels >= 1 and convs_per_level >= 1".into(),
            ));
        }
        let template = Self::layout(&spec, 0);
        Ok(Segmentor { spec, template })
    }

    pub fn spec(&self) -> &SegmentorSpec {
        &self.spec
    }

    fn layout(spec: &SegmentorSpec, seed: u64) -> ParamSet {
        let mut b = ParamBuilder::new("segmentor", seed);
        let ch = |l: usize| spec.base_channels << l;
        let mut cin = 1;
        for l in 0..=spec.depth {
            for j in 0..spec.convs_per_level {
                b.conv(&format!("enc{l}.conv{j}"), cin, ch(l), 3, spec.norm);
                cin = ch(l);
            }
        }
        for l in (0..spec.depth).rev() {
            let mut c = ch(l + 1) + if spec.skip_connections { ch(l) } else { 0 };
            for j in 0..spec.convs_per_level {
                b.conv(&format!("dec{l}.conv{j}"), c, ch(l), 3, spec.norm);
                c = ch(l);
            }
        }
        b.conv("head", ch(0), NUM_CLASSES, 1, NormKind::None);
        b.set
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        Self::layout(&self.spec, seed)
    }

    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        validate_params(&self.template, params)
    }

    /// Lays the segmentor onto `g`; the output var is `[N, 2, H, W]` softmax
    /// probabilities (channel 0 = no tumor, channel 1 = tumor).
    pub fn build(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        grad: bool,
        mode: Mode,
    ) -> Result<Built> {
        self.validate(params)?;
        if g.value(x).c() != 1 {
            return Err(Error::shape("1 input channel", g.value(x).c()));
        }
        let mut b = Binder::new(params, grad, mode);
        let norm = self.spec.norm;
        let (xp, h, w) = pad_to_multiple(g, x, 1 << self.spec.depth);
        let mut y = xp;
        let mut skips = Vec::new();
        for l in 0..=self.spec.depth {
            if l > 0 {
                y = g.max_pool2(y);
            }
            for j in 0..self.spec.convs_per_level {
                y = b.conv_block(g, y, &format!("enc{l}.conv{j}"), 1, norm, true)?;
            }
            skips.push(y);
        }
        for l in (0..self.spec.depth).rev() {
            y = g.upsample2(y);
            if self.spec.skip_connections {
                y = g.concat(y, skips[l]);
            }
            for j in 0..self.spec.convs_per_level {
                y = b.conv_block(g, y, &format!("dec{l}.conv{j}"), 1, norm, true)?;
            }
        }
        let mut logits = b.conv_block(g, y, "head", 1, NormKind::None, false)?;
        if (g.value(logits).h(), g.value(logits).w()) != (h, w) {
            logits = g.crop(logits, h, w);
        }
        let out = g.softmax_channels(logits);
        Ok(Built {
            out,
            buffer_updates: b.updates,
        })
    }

    pub fn forward_tensor(&self, params: &ParamSet, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone(), false);
        let built = self.build(&mut g, params, xv, false, mode)?;
        Ok(g.value(built.out).clone())
    }

    pub fn forward(&self, params: &ParamSet, images: &[ImageGrid], mode: Mode) -> Result<Vec<ProbMap>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = stack_images(images)?;
        let probs = self.forward_tensor(params, &x, mode)?;
        (0..probs.n()).map(|n| ProbMap::from_tensor(&probs, n)).collect()
    }

    pub fn forward_one(&self, params: &ParamSet, image: &ImageGrid, mode: Mode) -> Result<ProbMap> {
        let mut out = self.forward(params, std::slice::from_ref(image), mode)?;
        Ok(out.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(depth: usize) -> SegmentorSpec {
        SegmentorSpec {
            depth,
            base_channels: 2,
            ..SegmentorSpec::default()
        }
    }

    #[test]
    fn outputs_simplex_with_input_shape() {
        let seg = Segmentor::new(spec(2)).unwrap();
        let p = seg.init_params(1);
        let x = ImageGrid::new(10, 13, (0..130).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let pm = seg.forward_one(&p, &x, mode).unwrap();
            assert_eq!(pm.shape(), (10, 13));
            for (a, b) in pm.normal().iter().zip(pm.tumor()) {
                assert!((a + b - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn train_mode_reports_running_stat_updates() {
        let seg = Segmentor::new(spec(1)).unwrap();
        let p = seg.init_params(2);
        let mut g = Graph::new();
        let x = g.input(Tensor::full([2, 1, 8, 8], 0.3), false);
        let built = seg.build(&mut g, &p, x, false, Mode::Train).unwrap();
        // two stat buffers per normalized conv: (enc0, enc1, dec0) x 2 convs
        assert_eq!(built.buffer_updates.len(), 2 * 6);
        let built = seg.build(&mut g, &p, x, false, Mode::Eval).unwrap();
        assert!(built.buffer_updates.is_empty());
    }

    #[test]
    fn without_skips_has_fewer_params() {
        let a = Segmentor::new(spec(2)).unwrap().init_params(0);
        let b = Segmentor::new(SegmentorSpec {
            skip_connections: false,
            ..spec(2)
        })
        .unwrap()
        .init_params(0);
        assert!(b.num_scalars() < a.num_scalars());
    }
}

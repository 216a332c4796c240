//! Full detector: backbone → neck → heads.

use crate::blocks::{Activation, ConvKind, DownsampleMode, UpsampleMode};
use crate::detector::{Head, HeadMode, HeadSpec};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::necks::{Backbone, BackboneSpec, Neck, NeckKind, NeckSpec, PyramidFeatures, PYRAMID_STRIDES};
use crate::params::{Builder, Ctx, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub neck: NeckKind,
    pub neck_depth: usize,
    pub ihp_depth: usize,
    pub head: HeadMode,
    pub head_width: usize,
    pub num_classes: usize,
    pub upsample: UpsampleMode,
    pub downsample: DownsampleMode,
    pub conv: ConvKind,
    pub act: Activation,
}

impl ModelSpec {
    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec {
            widths: self.widths.clone(),
            depths: self.depths.clone(),
            downsample: self.downsample,
            body: self.conv,
            act: self.act,
        }
    }

    pub fn neck_spec(&self) -> NeckSpec {
        NeckSpec {
            kind: self.neck,
            channels: [self.widths[2], self.widths[3], self.widths[4]],
            depth: self.neck_depth,
            ihp_depth: self.ihp_depth,
            upsample: self.upsample,
            downsample: self.downsample,
            body: self.conv,
            act: self.act,
        }
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            mode: self.head,
            num_classes: self.num_classes,
            channels: vec![self.widths[2], self.widths[3], self.widths[4]],
            width: self.head_width,
            act: self.act,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

impl Detector {
    /// Builds the architecture and a freshly initialized parameter store.
    pub fn build<E: Element>(spec: &ModelSpec, seed: u64) -> Result<(Self, ParamStore<E>)> {
        if spec.widths.len() != 5 || spec.depths.len() != 5 {
            return Err(Error::config("model needs 5 backbone widths and 5 depths"));
        }
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let backbone = b.scoped("backbone", |b| Backbone::build(b, &spec.backbone()))?;
        let neck = b.scoped("neck", |b| Neck::build(b, &spec.neck_spec()))?;
        let head = b.scoped("head", |b| Head::build(b, &spec.head_spec()))?;
        Ok((
            Detector {
                spec: spec.clone(),
                backbone,
                neck,
                head,
            },
            store,
        ))
    }

    pub fn strides(&self) -> [usize; 3] {
        PYRAMID_STRIDES
    }

    pub fn features<E: Element>(&self, ctx: &mut Ctx<'_, E>, image: Var) -> Result<PyramidFeatures> {
        let feats = self.backbone.forward(ctx, image)?;
        self.neck.forward(ctx, &feats)
    }

    /// Raw predictions per level for an `[N, 3, S, S]` image batch.
    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, images: Tensor<E>) -> Result<Vec<Var>> {
        let [_, c, h, w] = images.dims4()?;
        if c != 3 || h != w || h % 32 != 0 || h == 0 {
            return Err(Error::shape(
                "detector",
                format!("expected square 3-channel input with side divisible by 32, got {:?}", images.shape()),
            ));
        }
        let x = ctx.input(images);
        let feats = self.features(ctx, x)?;
        self.head.forward(ctx, &feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::AlphaMode;
    use crate::params::Mode;

    pub(crate) fn tiny(neck: NeckKind) -> ModelSpec {
        ModelSpec {
            widths: vec![4, 8, 8, 16, 16],
            depths: vec![0, 1, 1, 1, 1],
            neck,
            neck_depth: 1,
            ihp_depth: 2,
            head: HeadMode::Coupled,
            head_width: 8,
            num_classes: 3,
            upsample: UpsampleMode::Sni(AlphaMode::Area),
            downsample: DownsampleMode::Esd1,
            conv: ConvKind::Plain,
            act: Activation::Silu,
        }
    }

    #[test]
    fn output_shapes_for_every_neck() {
        for kind in [
            NeckKind::None,
            NeckKind::Ihp,
            NeckKind::Fpn,
            NeckKind::PanetSimplified,
            NeckKind::Sa,
        ] {
            let (m, mut store) = Detector::build::<f64>(&tiny(kind), 1).unwrap();
            let mut ctx = Ctx::new(&mut store, Mode::Eval);
            let img = Tensor::zeros(&[2, 3, 64, 64]);
            let out = m.forward(&mut ctx, img).unwrap();
            let shapes: Vec<_> = out.iter().map(|&v| ctx.graph.shape(v).to_vec()).collect();
            assert_eq!(shapes, vec![vec![2, 8, 8, 8], vec![2, 8, 4, 4], vec![2, 8, 2, 2]], "{kind:?}");
        }
    }

    #[test]
    fn rejects_odd_input() {
        let (m, mut store) = Detector::build::<f64>(&tiny(NeckKind::Fpn), 1).unwrap();
        let mut ctx = Ctx::new(&mut store, Mode::Eval);
        assert!(m.forward(&mut ctx, Tensor::zeros(&[1, 3, 48, 48])).is_err());
    }
}

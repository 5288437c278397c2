//! Full detector assembly: backbone -> fusion -> heads, with the anchor
//! grid that matches the head's row order.

use scarfnet_core::detector::{build_anchors, Anchor, DetectionHeads};
use scarfnet_core::{
    Backbone, Bound, FusionNetwork, ParamStore, PyramidFeatures, PyramidSpec, Tape, Tensor,
};

use crate::config::TrainConfig;
use crate::data::NUM_CLASSES;
use crate::error::Result;

pub struct Model {
    pub spec: PyramidSpec,
    pub backbone: Backbone,
    pub fusion: FusionNetwork,
    pub heads: DetectionHeads,
    pub anchors: Vec<Anchor>,
}

/// Register the whole architecture for a config; parameter values are
/// seeded from `cfg.seed`.
pub fn build_model(cfg: &TrainConfig) -> Result<(Model, ParamStore<f32>)> {
    cfg.validate()?;
    let spec = PyramidSpec::desk_default().with_k(cfg.k);
    let mut store = ParamStore::new(cfg.seed);
    let backbone = Backbone::register("backbone", &spec, &mut store)?;
    let layouts = spec.level_layouts();
    let fusion = FusionNetwork::register(&cfg.fusion_config(), &layouts, &mut store, "fusion")?;
    let heads = DetectionHeads::register("head", &fusion.out_channels(), NUM_CLASSES, &mut store)?;
    let anchors = build_anchors(&layouts);
    Ok((Model { spec, backbone, fusion, heads, anchors }, store))
}

impl Model {
    /// Per-anchor class logits `[N, K+1]` and box offsets `[N, 4]`.
    pub fn forward_rows(
        &self,
        tape: &mut Tape<f32>,
        bound: &Bound<f32>,
        image: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let pyramid = self.backbone.forward(tape, bound, image)?;
        let fused = self.fusion.forward(tape, bound, &pyramid)?;
        Ok(self.heads.forward_rows(tape, bound, &fused.levels)?)
    }

    /// Raw pyramid and fused pyramid, for visualization.
    pub fn forward_pyramids(
        &self,
        tape: &mut Tape<f32>,
        bound: &Bound<f32>,
        image: &Tensor<f32>,
    ) -> Result<(PyramidFeatures<f32>, PyramidFeatures<f32>)> {
        let pyramid = self.backbone.forward(tape, bound, image)?;
        let fused = self.fusion.forward(tape, bound, &pyramid)?;
        Ok((pyramid, fused))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scarfnet_core::{CombineMode, FusionKind, Init};

    #[test]
    fn rows_cover_the_anchor_grid() {
        let cfg = TrainConfig::default();
        let (model, store) = build_model(&cfg).unwrap();
        let mut tape = Tape::new();
        let bound = store.snapshot();
        let img = scarfnet_core::init_tensor(&[3, 64, 64], Init::KaimingUniform, 1);
        let (cls, reg) = model.forward_rows(&mut tape, &bound, &img).unwrap();
        assert_eq!(cls.dims(), &[model.anchors.len(), NUM_CLASSES + 1]);
        assert_eq!(reg.dims(), &[model.anchors.len(), 4]);
        assert_eq!(tape.num_nodes(), 0, "snapshot forward must not record");
    }

    #[test]
    fn element_add_zero_init_fusion_is_noop_for_detection() {
        // zeroing the redistribution convs makes the full network emit the
        // raw pyramid: head outputs match the plain baseline exactly
        let mut cfg = TrainConfig::default();
        cfg.combine = CombineMode::ElementAdd;
        let (model, mut store) = build_model(&cfg).unwrap();
        for l in 0..3 {
            let name = format!("fusion.ar.l{l}.w");
            let dims = store.get(&name).unwrap().dims().to_vec();
            store.set(&name, Tensor::zeros(dims)).unwrap();
        }

        let mut plain_cfg = cfg.clone();
        plain_cfg.fusion = FusionKind::Plain;
        let (plain_model, mut plain_store) = build_model(&plain_cfg).unwrap();
        // same backbone and head weights (head widths agree under add)
        for name in plain_store.names().map(str::to_string).collect::<Vec<_>>() {
            if name.starts_with("backbone") || name.starts_with("head") {
                plain_store.set(&name, store.get(&name).unwrap().clone()).unwrap();
            }
        }

        let img = scarfnet_core::init_tensor(&[3, 64, 64], Init::KaimingUniform, 5);
        let mut tape = Tape::new();
        let (cls_a, reg_a) = model.forward_rows(&mut tape, &store.snapshot(), &img).unwrap();
        let (cls_b, reg_b) =
            plain_model.forward_rows(&mut tape, &plain_store.snapshot(), &img).unwrap();
        assert_eq!(cls_a.data(), cls_b.data());
        assert_eq!(reg_a.data(), reg_b.data());
    }
}

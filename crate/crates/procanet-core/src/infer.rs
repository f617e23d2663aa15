//! Tiled inference over full rasters and dataset-level evaluation.

use rayon::prelude::*;

use crate::data::{patch_offsets, Raster, ScenePair, PatchSet, EVAL_STRIDE, PATCH};
use crate::error::{Error, Result};
use crate::metrics::{confusion_counts, ConfusionCounts};
use crate::model::ProcaNet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const UNPREDICTED: f32 = 255.0;
pub const MASK_BAND: &str = "MASK";

/// Copies one `patch`² window of the named bands into a (1,B,patch,patch)
/// tensor, normalized by `scale` and clamped to [0,1].
fn window_inputs<F: Scalar>(
    raster: &Raster,
    bands: &[String],
    row: usize,
    col: usize,
    patch: usize,
    scale: f64,
) -> Result<Tensor<F>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "normalization scale must be positive, got {scale}"
        )));
    }
    let mut out = Tensor::zeros([1, bands.len(), patch, patch]);
    for (b, name) in bands.iter().enumerate() {
        let band = raster.band_index(name)?;
        for r in 0..patch {
            for c in 0..patch {
                let v = f64::from(raster.at(band, row + r, col + c));
                let v = (v / scale).clamp(0.0, 1.0);
                out.set(0, b, r, c, F::from_f64(v));
            }
        }
    }
    Ok(out)
}

/// Runs the network over non-overlapping `PATCH`² tiles of `raster` and
/// stitches the thresholded predictions (logit > 0 → 1) into a single-band
/// mask raster. Pixels not covered by any full tile — the right/bottom
/// margins when a dimension is not a multiple of the stride — are marked
/// `UNPREDICTED` (255). Tiles are independent, so the result does not
/// depend on how they are scheduled across threads.
pub fn predict_stitch<F: Scalar>(
    net: &ProcaNet<F>,
    raster: &Raster,
    bands1: &[String],
    bands2: Option<&[String]>,
    scale: f64,
) -> Result<Raster> {
    if raster.width() < PATCH || raster.height() < PATCH {
        return Err(Error::InvalidConfig(format!(
            "raster {}x{} is smaller than the {PATCH}x{PATCH} tile",
            raster.width(),
            raster.height()
        )));
    }
    if bands1.len() != net.in_channels() {
        return Err(Error::ChannelMismatch {
            op: "predict_stitch",
            expected: net.in_channels(),
            got: bands1.len(),
        });
    }
    match (bands2, net.in_channels2()) {
        (None, None) => {}
        (Some(b), Some(want)) if b.len() == want => {}
        (Some(b), Some(want)) => {
            return Err(Error::ChannelMismatch {
                op: "predict_stitch",
                expected: want,
                got: b.len(),
            })
        }
        (Some(_), None) => {
            return Err(Error::InvalidConfig(
                "second band list given but the network has a single encoder".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::InvalidConfig(
                "network expects a second input but no second band list was given".into(),
            ))
        }
    }

    let rows = patch_offsets(raster.height(), PATCH, EVAL_STRIDE);
    let cols = patch_offsets(raster.width(), PATCH, EVAL_STRIDE);
    let mut tiles = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            tiles.push((r, c));
        }
    }

    let masks: Vec<(usize, usize, Vec<f32>)> = tiles
        .par_iter()
        .map(|&(r, c)| {
            let x1 = window_inputs::<F>(raster, bands1, r, c, PATCH, scale)?;
            let x2 = match bands2 {
                Some(b) => Some(window_inputs::<F>(raster, b, r, c, PATCH, scale)?),
                None => None,
            };
            let logits = net.forward(&x1, x2.as_ref())?;
            let mask = logits
                .data()
                .iter()
                .map(|&z| f32::from(z.as_f64() > 0.0))
                .collect();
            Ok((r, c, mask))
        })
        .collect::<Result<_>>()?;

    let w = raster.width();
    let mut data = vec![UNPREDICTED; w * raster.height()];
    for (r, c, mask) in masks {
        for dr in 0..PATCH {
            let row = r + dr;
            data[row * w + c..row * w + c + PATCH]
                .copy_from_slice(&mask[dr * PATCH..(dr + 1) * PATCH]);
        }
    }
    Raster::new(
        raster.width() as u32,
        raster.height() as u32,
        vec![MASK_BAND.to_string()],
        data,
    )
}

/// Aggregates confusion counts over every patch in `set`, forwarding in
/// batches of `batch`. Counts are integers, so the result is independent
/// of the batch size.
pub fn confusion_over_patchset<F: Scalar>(
    net: &ProcaNet<F>,
    scenes: &[ScenePair],
    set: &PatchSet,
    bands1: &[String],
    bands2: Option<&[String]>,
    scale: f64,
    batch: usize,
) -> Result<ConfusionCounts> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be nonzero".into()));
    }
    let mut total = ConfusionCounts::default();
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch) {
        let x1 = crate::data::gather_inputs::<F>(scenes, set, chunk, bands1, scale)?;
        let x2 = match bands2 {
            Some(b) => Some(crate::data::gather_inputs::<F>(scenes, set, chunk, b, scale)?),
            None => None,
        };
        let truth = crate::data::gather_labels::<F>(scenes, set, chunk)?;
        let logits = net.forward(&x1, x2.as_ref())?;
        let pred = logits.map(|z| F::from_f64(f64::from(z.as_f64() > 0.0)));
        total.merge(&confusion_counts(&pred, &truth)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_patch_set;
    use crate::model::ModelConfig;
    use crate::synth::synth_scene;

    fn tiny_net(seed: u64) -> ProcaNet<f32> {
        ProcaNet::init(&ModelConfig {
            levels: 2,
            base_channels: 4,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn band_names() -> (Vec<String>, Vec<String>) {
        (
            vec!["R".into(), "G".into(), "B".into(), "NIR".into()],
            vec!["NIR".into()],
        )
    }

    #[test]
    fn full_multiple_of_stride_leaves_no_unpredicted_pixels() {
        let net = tiny_net(5);
        let scene = synth_scene(11, 256, 256).unwrap();
        let (b1, b2) = band_names();
        let mask = predict_stitch(&net, &scene.image, &b1, Some(&b2), 1.0).unwrap();
        assert_eq!((mask.width(), mask.height(), mask.bands()), (256, 256, 1));
        assert!(
            mask.data().iter().all(|&v| v == 0.0 || v == 1.0),
            "covered mask must be binary"
        );
    }

    #[test]
    fn ragged_raster_marks_margins_unpredicted() {
        let net = tiny_net(5);
        // 300x300: tiles cover 0..256, leaving a 44-pixel margin.
        let scene = synth_scene(12, 300, 300).unwrap();
        let (b1, b2) = band_names();
        let mask = predict_stitch(&net, &scene.image, &b1, Some(&b2), 1.0).unwrap();
        for r in 0..300 {
            for c in 0..300 {
                let v = mask.at(0, r, c);
                if r < 256 && c < 256 {
                    assert!(v == 0.0 || v == 1.0, "covered pixel ({r},{c}) got {v}");
                } else {
                    assert_eq!(v, UNPREDICTED, "margin pixel ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn zero_network_predicts_the_negative_class() {
        // Zero weights give logit 0 everywhere; the threshold is strict.
        let mut net = tiny_net(5);
        for (_, k) in net.named_kernels_mut() {
            k.weight.iter_mut().for_each(|w| *w = 0.0);
            k.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let scene = synth_scene(13, 128, 128).unwrap();
        let (b1, b2) = band_names();
        let mask = predict_stitch(&net, &scene.image, &b1, Some(&b2), 1.0).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn undersized_raster_is_rejected() {
        let net = tiny_net(5);
        let raster = Raster::new(64, 64, vec!["NIR".into()], vec![0.0; 64 * 64]).unwrap();
        let bands = vec!["NIR".into()];
        let err = predict_stitch(&net, &raster, &bands, None, 1.0).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "got {err:?}");
    }

    #[test]
    fn band_count_mismatch_is_rejected() {
        let net = tiny_net(5);
        let scene = synth_scene(14, 128, 128).unwrap();
        let bands = vec!["R".into(), "G".into()];
        let err = predict_stitch(&net, &scene.image, &bands, None, 1.0).unwrap_err();
        assert!(matches!(err, Error::ChannelMismatch { .. }), "got {err:?}");
    }

    #[test]
    fn confusion_counts_do_not_depend_on_batch_size() {
        let net = tiny_net(6);
        let scenes: Vec<_> = (0..3).map(|i| synth_scene(20 + i, 256, 256).unwrap()).collect();
        let set = build_patch_set(&scenes, PATCH, EVAL_STRIDE, false).unwrap();
        assert_eq!(set.len(), 12);
        let (b1, b2) = band_names();
        let a = confusion_over_patchset(&net, &scenes, &set, &b1, Some(&b2), 1.0, 1).unwrap();
        let b = confusion_over_patchset(&net, &scenes, &set, &b1, Some(&b2), 1.0, 5).unwrap();
        let c = confusion_over_patchset(&net, &scenes, &set, &b1, Some(&b2), 1.0, 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
        assert_eq!(a.total(), 12 * 128 * 128 - nodata_pixels(&scenes));
    }

    fn nodata_pixels(scenes: &[ScenePair]) -> u64 {
        scenes
            .iter()
            .map(|s| s.label.data().iter().filter(|&&v| v == 255.0).count() as u64)
            .sum()
    }

    #[test]
    fn stitched_mask_matches_patchwise_confusion() {
        // predict_stitch and confusion_over_patchset must agree on a raster
        // whose dims are stride multiples: same tiles, same thresholds.
        let net = tiny_net(7);
        let scene = synth_scene(30, 256, 256).unwrap();
        let (b1, b2) = band_names();
        let mask = predict_stitch(&net, &scene.image, &b1, Some(&b2), 1.0).unwrap();
        let scenes = vec![scene.clone()];
        let set = build_patch_set(&scenes, PATCH, EVAL_STRIDE, false).unwrap();
        let counts = confusion_over_patchset(&net, &scenes, &set, &b1, Some(&b2), 1.0, 4).unwrap();

        let mut direct = ConfusionCounts::default();
        for r in 0..256 {
            for c in 0..256 {
                let truth = scene.label.at(0, r, c);
                if truth == 255.0 {
                    continue;
                }
                let pred = mask.at(0, r, c);
                match (pred == 1.0, truth == 1.0) {
                    (true, true) => direct.true_pos += 1,
                    (true, false) => direct.false_pos += 1,
                    (false, true) => direct.false_neg += 1,
                    (false, false) => direct.true_neg += 1,
                }
            }
        }
        assert_eq!(counts, direct);
    }
}

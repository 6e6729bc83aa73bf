//! Checks against the known location of the deciding object in the
//! synthetic data, using a classifier trained once for the whole file.

mod common;

use std::path::Path;
use std::sync::OnceLock;

use geoxplain::attribution::{compute_attribution, RefCam, SmoothGrad, SmoothGradConfig};
use geoxplain::classifier::{predict_top1, ToyCnn};
use geoxplain::faithfulness::{evaluate_boxes, fill_color, EvalContext, FaithfulnessConfig};
use geoxplain::ingest::{self, ImageTensor, Normalization, PreprocessConfig, Split};
use geoxplain::pipeline::{self, crops_file, CropRecord};
use geoxplain::selection::CropBox;
use geoxplain::synthetic::{load_cues, CueRecord};

use common::Workspace;

struct Fixture {
    ws: Workspace,
    model: ToyCnn,
    /// Raw image, label and cue for each eval image.
    eval: Vec<(String, ImageTensor, usize, CueRecord)>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ws = Workspace::new(60, 20);
        let accuracy = ws.train();
        assert!(accuracy >= 0.9, "classifier accuracy {accuracy}");
        let model = ToyCnn::load(&ws.path().join(&ws.config.classifier.weights)).unwrap();
        let manifest_path = ws.path().join(&ws.config.run.manifest);
        let manifest = ingest::load_manifest(&manifest_path).unwrap();
        let cues = load_cues(&ws.path().join("data/cues.jsonl")).unwrap();
        let raw_cfg = PreprocessConfig {
            normalization: Normalization::Raw01,
            ..ws.config.ingest.preprocess.clone()
        };
        let eval = manifest
            .split(Split::Eval)
            .map(|r| {
                let img = ingest::load_image(&ingest::resolve_uri(&manifest_path, &r.uri)).unwrap();
                let raw = ingest::preprocess(&img, &raw_cfg).unwrap();
                let cue = cues.iter().find(|c| c.id == r.id).unwrap().clone();
                (r.id.clone(), raw, r.label, cue)
            })
            .collect();
        Fixture { ws, model, eval }
    })
}

fn near_cue(cue: &CueRecord, row: usize, col: usize, slack: usize) -> bool {
    row + slack >= cue.row0 && row <= cue.row1 + slack && col + slack >= cue.col0 && col <= cue.col1 + slack
}

fn argmax_hits(f: &Fixture, backend: &dyn geoxplain::attribution::AttributionBackend, slack: usize) -> f64 {
    let pre = &f.ws.config.ingest.preprocess;
    let mut hits = 0;
    for (_, raw, label, cue) in &f.eval {
        let x = ingest::model_input(raw, pre);
        let map = compute_attribution(&f.model, &x, *label, backend).unwrap();
        let best = (0..map.values.len())
            .max_by(|&a, &b| map.values[a].total_cmp(&map.values[b]).then(b.cmp(&a)))
            .unwrap();
        if near_cue(cue, best / map.width, best % map.width, slack) {
            hits += 1;
        }
    }
    hits as f64 / f.eval.len() as f64
}

#[test]
fn refcam_peak_lands_on_the_cue() {
    let f = fixture();
    // the activation grid is 12x12, so allow one upsampled cell of slack
    let rate = argmax_hits(f, &RefCam, 4);
    assert!(rate >= 0.8, "refcam peak near cue on {rate:.2} of images");
}

/// Share of images whose mean attribution on the cue exceeds the mean
/// everywhere else.
fn cue_enrichment(f: &Fixture, backend: &dyn geoxplain::attribution::AttributionBackend) -> f64 {
    let pre = &f.ws.config.ingest.preprocess;
    let mut enriched = 0;
    for (_, raw, label, cue) in &f.eval {
        let x = ingest::model_input(raw, pre);
        let map = compute_attribution(&f.model, &x, *label, backend).unwrap();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
        for (i, &v) in map.values.iter().enumerate() {
            if near_cue(cue, i / map.width, i % map.width, 0) {
                inside += v as f64;
                n_in += 1;
            } else {
                outside += v as f64;
                n_out += 1;
            }
        }
        if inside / n_in as f64 > outside / n_out as f64 {
            enriched += 1;
        }
    }
    enriched as f64 / f.eval.len() as f64
}

#[test]
fn attribution_mass_concentrates_on_the_cue() {
    let f = fixture();
    let refcam = cue_enrichment(f, &RefCam);
    let smoothgrad = cue_enrichment(f, &SmoothGrad(SmoothGradConfig::default()));
    assert!(refcam >= 0.9, "refcam enriched on {refcam:.2} of images");
    // gradient maps are noisier; a map unrelated to the image sits near 0.5
    assert!(smoothgrad >= 0.65, "smoothgrad enriched on {smoothgrad:.2} of images");
}

#[test]
fn the_cue_box_alone_decides_the_class() {
    // keeping only the cue keeps the class; removing it leaves the model
    // guessing, so the label survives deletion no more often than chance
    let f = fixture();
    let faith = FaithfulnessConfig::default();
    let ctx = EvalContext {
        model: &f.model,
        preprocess: &f.ws.config.ingest.preprocess,
        config: &faith,
        run_seed: 0,
    };
    let (mut ins_ok, mut del_kept) = (0, 0);
    for (_, raw, label, cue) in &f.eval {
        let cue_box = CropBox {
            row0: cue.row0,
            col0: cue.col0,
            row1: cue.row1,
            col1: cue.col1,
            source_segment_id: 0,
            score: 1.0,
        };
        let fill = fill_color(faith.fill, raw, ctx.preprocess);
        let (deletion, insertion, _) = evaluate_boxes(&ctx, raw, &[cue_box], fill).unwrap();
        ins_ok += (insertion == *label) as usize;
        del_kept += (deletion == *label) as usize;
    }
    let n = f.eval.len() as f64;
    let (ins, del) = (ins_ok as f64 / n, del_kept as f64 / n);
    assert!(ins >= 0.9, "insertion kept the label on {ins:.2} of images");
    assert!(del <= 0.5, "deletion kept the label on {del:.2} of images");
}

#[test]
fn top_ranked_crop_covers_the_cue() {
    let f = fixture();
    let cache = tempfile::tempdir().unwrap();
    let run = f.ws.run_with(&pipeline::Overrides {
        cache_root: Some(cache.path().to_path_buf()),
        ..Default::default()
    });
    pipeline::cmd_extract(&run).unwrap();
    let rows: Vec<CropRecord> = std::fs::read_to_string(crops_file(&run.pair_dir("refcam", "fallback")))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut hits = 0;
    for row in &rows {
        let (_, raw, _, cue) = f.eval.iter().find(|e| e.0 == row.image_id).unwrap();
        let Some(top) = row.elements.first() else { continue };
        let c = top.crop;
        let centre = ((cue.row0 + cue.row1) / 2, (cue.col0 + cue.col1) / 2);
        if c.contains(centre.0, centre.1) {
            hits += 1;
        }
        assert!(c.fits(raw.height, raw.width));
    }
    let rate = hits as f64 / rows.len() as f64;
    assert!(rate >= 0.7, "top crop holds the cue centre on {rate:.2} of images");
    // predictions recorded for the crops match the model
    let (_, raw, _, _) = &f.eval[0];
    let x = ingest::model_input(raw, &f.ws.config.ingest.preprocess);
    assert_eq!(rows[0].predicted_class, Some(predict_top1(&f.model, &x).unwrap().0));
}

#[test]
fn fixture_paths_are_inside_the_workspace() {
    let f = fixture();
    assert!(Path::new(&f.ws.path().join("data/manifest.jsonl")).exists());
}

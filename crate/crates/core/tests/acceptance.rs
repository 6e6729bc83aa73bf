//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run with
//! `cargo test -p geoxplain --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geoxplain::attribution::{threshold_top_p, AttributionMap, SaliencyMask};
use geoxplain::config::RunConfig;
use geoxplain::faithfulness::{apply_masking, MaskMode, MaskingSpec};
use geoxplain::grid::BitGrid;
use geoxplain::ingest::{ImageTensor, Normalization};
use geoxplain::pipeline::{self, crops_file, results_file, Overrides, Summary};
use geoxplain::segmentation::SegmentMask;
use geoxplain::selection::{
    dedup_containment_iou, rank_order, score_segment, CropBox, Ranked, ScoredSegment, SelectionConfig,
};

use common::Workspace;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BitGrid {
    loop {
        let g = BitGrid::from_fn(h, w, |_, _| rng.random_bool(density));
        if g.count_ones() > 0 {
            return g;
        }
    }
}

// ------------------------------------------------------------ scoring

/// Direct enumeration: loops over every pixel, rounds the centroid with
/// exact integer arithmetic and falls back to the nearest member.
fn oracle_score(map: &[f32], w: usize, mask: &[bool], saliency: &[bool]) -> [f64; 4] {
    let (mut area, mut inside, mut sum, mut sr, mut sc) = (0i64, 0i64, 0.0f64, 0i64, 0i64);
    for i in 0..map.len() {
        if mask[i] {
            area += 1;
            sum += map[i] as f64;
            sr += (i / w) as i64;
            sc += (i % w) as i64;
            if saliency[i] {
                inside += 1;
            }
        }
    }
    // nearest integer to s/a, halves going to the smaller value
    let round_half_down = |s: i64| {
        let mut k = s / area;
        while 2 * (s - k * area) > area {
            k += 1;
        }
        k
    };
    let (cr, cc) = (round_half_down(sr), round_half_down(sc));
    let mut best: Option<(i64, usize)> = None;
    for i in 0..map.len() {
        if mask[i] {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            let d = (r - cr).pow(2) + (c - cc).pow(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
    }
    let overlap = inside as f64 / area as f64;
    let mean = sum / area as f64;
    let central = map[best.unwrap().1] as f64;
    let score = if overlap > 0.0 && mean > 0.0 && central > 0.0 {
        (overlap * mean * central).cbrt()
    } else {
        0.0
    };
    [overlap, mean, central, score]
}

fn scoring_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (8, 8);
    let trials = 500;
    let mut worst = 0.0f64;
    for t in 0..trials {
        let values: Vec<f32> = (0..h * w)
            .map(|_| {
                if rng.random_bool(0.15) {
                    0.0
                } else {
                    rng.random::<f32>()
                }
            })
            .collect();
        let map = AttributionMap::new(h, w, values.clone(), 0, "oracle");
        let density = rng.random_range(0.05..0.6);
        let mask = random_grid(&mut rng, h, w, density);
        let saliency = SaliencyMask {
            percentile_p: 0.0,
            mask: BitGrid::from_fn(h, w, |_, _| rng.random_bool(0.3)),
        };
        let seg = SegmentMask::new(t, mask.clone(), "oracle", None).map_err(|e| e.to_string())?;
        let got = score_segment(&seg, &map, &saliency).map_err(|e| e.to_string())?;
        let want = oracle_score(&values, w, mask.bits(), saliency.mask.bits());
        let got = [
            got.overlap_factor,
            got.mean_importance,
            got.central_importance,
            got.score,
        ];
        for (g, o) in got.iter().zip(want) {
            worst = worst.max((g - o).abs());
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-9, format!("max abs error {worst:e}"))?;
    ensure(elapsed.as_secs_f64() < 1.0, format!("took {elapsed:?}"))?;
    Ok(format!("{trials} triples, max abs error {worst:.1e}, {elapsed:.0?}"))
}

// ---------------------------------------------------------- threshold

fn threshold_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ps = [1u64, 20, 50, 100];
    for m in 0..50 {
        let (h, w) = (rng.random_range(3..24), rng.random_range(3..24));
        let n = h * w;
        // coarse levels force ties at the cutoff
        let values: Vec<f32> = (0..n).map(|_| rng.random_range(0..12) as f32 / 11.0).collect();
        let map = AttributionMap::new(h, w, values.clone(), 0, "t");
        let mut previous: Option<BitGrid> = None;
        for p in ps {
            let mask = threshold_top_p(&map, p as f64).map_err(|e| e.to_string())?.mask;
            let want = (p as usize * n).div_ceil(100);
            ensure(
                mask.count_ones() == want,
                format!("map {m}, p {p}: popcount {} != {want}", mask.count_ones()),
            )?;
            let bits = mask.bits();
            let min_in = (0..n)
                .filter(|&i| bits[i])
                .map(|i| values[i])
                .fold(f32::INFINITY, f32::min);
            let max_out = (0..n)
                .filter(|&i| !bits[i])
                .map(|i| values[i])
                .fold(f32::NEG_INFINITY, f32::max);
            ensure(min_in >= max_out, format!("map {m}, p {p}: dominance violated"))?;
            if let Some(prev) = &previous {
                ensure(prev.is_subset_of(&mask), format!("map {m}, p {p}: not nested"))?;
            }
            previous = Some(mask);
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs_f64() < 1.0, format!("took {elapsed:?}"))?;
    Ok(format!("50 maps x p in {ps:?}, {elapsed:.0?}"))
}

// -------------------------------------------------------------- dedup

/// All pairwise duplicate relations first, then a forward pass.
fn reference_dedup(masks: &[&BitGrid], cfg: &SelectionConfig) -> Vec<usize> {
    let n = masks.len();
    let count = |g: &BitGrid| g.bits().iter().filter(|&&b| b).count() as f64;
    let mut dup = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            let inter = masks[i]
                .bits()
                .iter()
                .zip(masks[j].bits())
                .filter(|(a, b)| **a && **b)
                .count() as f64;
            let (ai, aj) = (count(masks[i]), count(masks[j]));
            let iou = inter / (ai + aj - inter);
            dup[i][j] =
                iou >= cfg.iou_threshold || (inter / aj >= cfg.containment_threshold && ai / aj <= cfg.area_ratio_gate);
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..n {
        if kept.iter().all(|&i| !dup[i][j]) {
            kept.push(j);
        }
    }
    kept
}

fn rect_mask(h: usize, w: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> BitGrid {
    BitGrid::from_fn(h, w, |r, c| (r0..=r1).contains(&r) && (c0..=c1).contains(&c))
}

fn dedup_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = SelectionConfig::default();
    let (h, w) = (16, 16);
    let sets = 200;
    let mut total_dropped = 0;
    for s in 0..sets {
        let n = rng.random_range(2..14);
        let mut segs = Vec::new();
        for id in 0..n {
            let m = if !segs.is_empty() && rng.random_bool(0.4) {
                // near copy of an earlier segment: some pixels toggled
                let base: &SegmentMask = &segs[rng.random_range(0..segs.len())];
                let src = base.mask().clone();
                let flip = rng.random_range(0.0..0.15);
                let g = BitGrid::from_fn(h, w, |r, c| src.get(r, c) ^ rng.random_bool(flip));
                if g.count_ones() == 0 {
                    src
                } else {
                    g
                }
            } else if rng.random_bool(0.6) {
                let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
                let (r1, c1) = (rng.random_range(r0..h), rng.random_range(c0..w));
                rect_mask(h, w, r0, c0, r1, c1)
            } else {
                random_grid(&mut rng, h, w, 0.4)
            };
            segs.push(SegmentMask::new(id, m, "t", None).unwrap());
        }
        let mut ranked: Vec<Ranked> = segs
            .iter()
            .map(|seg| Ranked {
                scored: ScoredSegment {
                    segment_id: seg.segment_id(),
                    overlap_factor: 1.0,
                    mean_importance: 1.0,
                    central_importance: 1.0,
                    // coarse scores so id tie-breaks matter
                    score: rng.random_range(1..5) as f64 / 4.0,
                },
                segment: seg,
            })
            .collect();
        ranked.sort_by(|a, b| rank_order(&a.scored, &b.scored));
        let masks: Vec<&BitGrid> = ranked.iter().map(|r| r.segment.mask()).collect();
        let want: Vec<u32> = reference_dedup(&masks, &cfg)
            .into_iter()
            .map(|i| ranked[i].scored.segment_id)
            .collect();
        let got: Vec<u32> = dedup_containment_iou(ranked, &cfg)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|r| r.scored.segment_id)
            .collect();
        ensure(got == want, format!("set {s}: kept {got:?}, reference {want:?}"))?;
        total_dropped += n as usize - got.len();
    }

    // small part inside a much larger segment survives regardless of order
    let mut preserved = 0;
    for _ in 0..50 {
        let side = rng.random_range(8..16);
        let (r0, c0) = (rng.random_range(0..h - side + 1), rng.random_range(0..w - side + 1));
        let big = rect_mask(h, w, r0, c0, r0 + side - 1, c0 + side - 1);
        let small_side = rng.random_range(1..=side / 2);
        let (sr, sc) = (
            rng.random_range(r0..=r0 + side - small_side),
            rng.random_range(c0..=c0 + side - small_side),
        );
        let small = rect_mask(h, w, sr, sc, sr + small_side - 1, sc + small_side - 1);
        ensure(
            big.count_ones() as f64 / small.count_ones() as f64 > cfg.area_ratio_gate,
            "ratio too small",
        )?;
        let big = SegmentMask::new(0, big, "t", None).unwrap();
        let small = SegmentMask::new(1, small, "t", None).unwrap();
        let scored = |id, score| ScoredSegment {
            segment_id: id,
            overlap_factor: 1.0,
            mean_importance: 1.0,
            central_importance: 1.0,
            score,
        };
        let ranked = vec![
            Ranked {
                scored: scored(0, 0.9),
                segment: &big,
            },
            Ranked {
                scored: scored(1, 0.5),
                segment: &small,
            },
        ];
        let kept = dedup_containment_iou(ranked, &cfg).map_err(|e| e.to_string())?;
        ensure(kept.len() == 2, "small segment inside a large one was dropped")?;
        preserved += 1;
    }
    Ok(format!(
        "{sets} random sets match ({total_dropped} duplicates removed), {preserved}/50 small-inside-large kept"
    ))
}

// ------------------------------------------------------------ masking

fn masking_complementarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut checked = 0usize;
    for pair in 0..50 {
        let (h, w) = (rng.random_range(4..40), rng.random_range(4..40));
        let data: Vec<f32> = (0..3 * h * w).map(|_| rng.random()).collect();
        let image = ImageTensor::new(h, w, Normalization::Raw01, data);
        let boxes: Vec<CropBox> = (0..rng.random_range(0..6))
            .map(|_| {
                let (row0, col0) = (rng.random_range(0..h), rng.random_range(0..w));
                CropBox {
                    row0,
                    col0,
                    row1: rng.random_range(row0..h),
                    col1: rng.random_range(col0..w),
                    source_segment_id: 0,
                    score: 1.0,
                }
            })
            .collect();
        let fill = [rng.random(), rng.random(), rng.random()];
        let spec = |mode| MaskingSpec {
            boxes: boxes.clone(),
            mode,
            fill,
        };
        let del = apply_masking(&image, &spec(MaskMode::Deletion)).map_err(|e| e.to_string())?;
        let ins = apply_masking(&image, &spec(MaskMode::Insertion)).map_err(|e| e.to_string())?;
        for c in 0..3 {
            for r in 0..h {
                for col in 0..w {
                    let mut got = [del.get(c, r, col).to_bits(), ins.get(c, r, col).to_bits()];
                    let mut want = [image.get(c, r, col).to_bits(), fill[c].to_bits()];
                    got.sort_unstable();
                    want.sort_unstable();
                    ensure(got == want, format!("pair {pair}: pixel ({c},{r},{col})"))?;
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("50 pairs, {checked} channel values exact"))
}

// -------------------------------------------------------- end to end

struct Trained {
    ws: Workspace,
    accuracy: f64,
}

fn train_workspace() -> Trained {
    let ws = Workspace::new(60, 100);
    let accuracy = ws.train();
    Trained { ws, accuracy }
}

fn end_to_end(t: &Trained) -> Outcome {
    let start = Instant::now();
    let eval_images = 300;
    ensure(
        t.accuracy >= 0.9,
        format!("toy classifier eval accuracy {:.3} < 0.9", t.accuracy),
    )?;
    let mut del_margin = Vec::new();
    let mut ins_margin = Vec::new();
    for seed in 0..3u64 {
        let run = t.ws.run_with(&Overrides {
            seed: Some(seed),
            ..Default::default()
        });
        pipeline::cmd_extract(&run).map_err(|e| e.to_string())?;
        let summary = pipeline::cmd_evaluate(&run).map_err(|e| e.to_string())?;
        let report = &summary.entries[0].report;
        let (g, r) = (
            report.guided.as_ref().ok_or("no guided results")?,
            report.random.as_ref().ok_or("no random results")?,
        );
        del_margin.push(g.deletion_drop - r.deletion_drop);
        ins_margin.push(g.accuracy_insertion - r.accuracy_insertion);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (dm, im) = (mean(&del_margin), mean(&ins_margin));
    let detail = format!(
        "{eval_images} eval images, classifier acc {:.3}, deletion-drop margin {dm:.3}, insertion margin {im:.3} (3 seeds), {:.1?}",
        t.accuracy,
        start.elapsed()
    );
    ensure(dm > 0.05 && im > 0.05, detail.clone())?;
    Ok(detail)
}

fn pair_files(run_dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let pair = run_dir.join(pipeline::pair_name("refcam", "fallback"));
    for p in [crops_file(&pair), results_file(&pair), run_dir.join("summary.json")] {
        out.insert(
            p.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&p).unwrap_or_default(),
        );
    }
    out
}

fn determinism(t: &Trained) -> Outcome {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let cache = tempfile::tempdir().map_err(|e| e.to_string())?;
        let run = t.ws.run_with(&Overrides {
            seed: Some(7),
            cache_root: Some(cache.path().to_path_buf()),
            ..Default::default()
        });
        pipeline::cmd_extract(&run).map_err(|e| e.to_string())?;
        pipeline::cmd_evaluate(&run).map_err(|e| e.to_string())?;
        outputs.push(pair_files(&run.dir));
    }
    for (name, bytes) in &outputs[0] {
        ensure(!bytes.is_empty(), format!("{name} is empty"))?;
        ensure(outputs[1][name] == *bytes, format!("{name} differs between runs"))?;
    }
    let sizes: Vec<String> = outputs[0].iter().map(|(k, v)| format!("{k} {} B", v.len())).collect();
    Ok(format!("byte-identical across separate roots: {}", sizes.join(", ")))
}

// ---------------------------------------------------------- degenerate

fn degenerate() -> Outcome {
    let mut ws = Workspace::new(1, 4);
    ws.use_stubs();
    ws.config.attribution.stub.kind = geoxplain::attribution::StubKind::Constant;
    ws.save();
    let cache = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = ws.config_path();
    let config = config.to_str().unwrap();
    for cmd in ["extract", "evaluate"] {
        let out = common::geoxplain(&[cmd, "--config", config], cache.path());
        ensure(
            out.status.code() == Some(0),
            format!(
                "{cmd} exited {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ),
        )?;
    }
    let run = ws.run_with(&Overrides {
        cache_root: Some(cache.path().to_path_buf()),
        ..Default::default()
    });
    let summary = Summary::load(&run.dir).map_err(|e| e.to_string())?;
    let report = &summary.entries[0].report;
    let excluded = report.excluded.get("no_crops").copied().unwrap_or(0);
    ensure(
        excluded == 12,
        format!("expected 12 images excluded for no_crops, got {excluded}"),
    )?;
    ensure(
        report.guided.is_none() && report.random.is_none(),
        "excluded images leaked into the aggregates",
    )?;
    Ok(format!(
        "constant map: {excluded}/12 images excluded (no_crops), exit 0"
    ))
}

// ------------------------------------------------------------- recipe

fn trainer_recipe() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/default.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let cfg = RunConfig::from_toml(&text, &path).map_err(|e| e.to_string())?;
    let t = &cfg.classifier.train;
    ensure(t.learning_rate == 3e-4, format!("learning_rate {}", t.learning_rate))?;
    ensure(t.weight_decay == 0.02, format!("weight_decay {}", t.weight_decay))?;
    ensure(
        t.label_smoothing == 0.1,
        format!("label_smoothing {}", t.label_smoothing),
    )?;
    ensure(t.patience == 30, format!("patience {}", t.patience))?;
    ensure(
        *t == geoxplain::classifier::TrainConfig::default(),
        "shipped file differs from TrainConfig::default()",
    )?;
    Ok("lr 3e-4, weight decay 0.02, label smoothing 0.1, patience 30".into())
}

fn main() {
    // `cargo test -- --list` and filters pass through here
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let mut failures = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name:<26} {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name:<26} {detail}");
            }
        }
    };

    report("scoring-oracle", &mut scoring_oracle);
    report("threshold-contract", &mut threshold_contract);
    report("dedup-oracle", &mut dedup_oracle);
    report("masking-complementarity", &mut masking_complementarity);
    let trained = train_workspace();
    report("end-to-end-directional", &mut || end_to_end(&trained));
    report("determinism", &mut || determinism(&trained));
    report("degenerate-robustness", &mut degenerate);
    report("trainer-recipe", &mut trainer_recipe);

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

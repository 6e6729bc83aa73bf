mod common;

use std::fs;
use std::path::{Path, PathBuf};

use geoxplain::classifier::BackendKind;
use geoxplain::external::ExternalSpec;
use geoxplain::pipeline::{self, crops_file, CropRecord, ImageStatus, Overrides, PipelineError};
use geoxplain::segmentation::load_segment_set;

use common::Workspace;

fn script() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fake_backend.py")
}

fn spec(extra: &[&str]) -> ExternalSpec {
    let mut args = vec![script().display().to_string()];
    args.extend(extra.iter().map(|s| s.to_string()));
    ExternalSpec {
        program: PathBuf::from("/usr/bin/python3"),
        args,
        weights: None,
        accepts_concepts: true,
    }
}

fn external_workspace(segment_args: &[&str]) -> Workspace {
    let mut ws = Workspace::new(1, 3);
    fs::write(ws.path().join("concepts.txt"), "# prompts\nred thing\n\nsign\n").unwrap();
    let c = &mut ws.config;
    c.classifier.backend = BackendKind::External;
    c.classifier.external = Some(spec(&[]));
    c.attribution.methods = vec!["py-attr".into()];
    c.attribution.external.insert("py-attr".into(), spec(&[]));
    c.segmentation.backends = vec!["py-seg".into(), "fallback".into()];
    c.segmentation.external.insert("py-seg".into(), spec(segment_args));
    c.segmentation.concepts_file = Some("concepts.txt".into());
    c.faithfulness.random_repeats = 2;
    ws.save();
    ws
}

fn has_python() -> bool {
    Path::new("/usr/bin/python3").exists()
}

#[test]
fn pipeline_runs_against_external_processes() {
    if !has_python() {
        eprintln!("python3 not found; skipping");
        return;
    }
    let ws = external_workspace(&[]);
    let cache = tempfile::tempdir().unwrap();
    let run = ws.run_with(&Overrides {
        cache_root: Some(cache.path().to_path_buf()),
        ..Default::default()
    });
    pipeline::cmd_extract(&run).unwrap();
    let summary = pipeline::cmd_evaluate(&run).unwrap();
    assert_eq!(summary.entries.len(), 2);

    let rows: Vec<CropRecord> = fs::read_to_string(crops_file(&run.pair_dir("py-attr", "py-seg")))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.status == ImageStatus::Ok && r.n_segments == 4));
    // the predicted class is the dominant colour channel, which the cue decides
    let correct = rows.iter().filter(|r| r.predicted_class == Some(r.label)).count();
    assert!(correct >= 1);

    // concept prompts reach the concept-capable backend only
    let stages: Vec<PathBuf> = fs::read_dir(cache.path().join("stages"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let seg_dir = stages
        .iter()
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("segments-py-seg"))
        .unwrap();
    let file = fs::read_dir(seg_dir).unwrap().next().unwrap().unwrap().path();
    let set = load_segment_set(&file).unwrap();
    assert!(set.segments.iter().all(|s| s.concept_hint() == Some("red thing")));
    let fallback_dir = stages
        .iter()
        .find(|p| {
            p.file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("segments-fallback")
        })
        .unwrap();
    let file = fs::read_dir(fallback_dir).unwrap().next().unwrap().unwrap().path();
    assert!(load_segment_set(&file)
        .unwrap()
        .segments
        .iter()
        .all(|s| s.concept_hint().is_none()));
}

#[test]
fn backend_failing_every_image_is_fatal() {
    if !has_python() {
        return;
    }
    let ws = external_workspace(&["--fail-segment"]);
    let cache = tempfile::tempdir().unwrap();
    let out = common::geoxplain(
        &["extract", "--config", ws.config_path().to_str().unwrap()],
        cache.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("segmenter offline"));
}

#[test]
fn missing_program_is_fatal() {
    let mut ws = Workspace::new(1, 1);
    ws.use_stubs();
    ws.config.segmentation.backends = vec!["ghost".into()];
    ws.config.segmentation.external.insert(
        "ghost".into(),
        ExternalSpec {
            program: PathBuf::from("does-not-exist"),
            args: vec![],
            weights: None,
            accepts_concepts: false,
        },
    );
    let err = pipeline::cmd_extract(&ws.run()).unwrap_err();
    assert!(matches!(err, PipelineError::BackendFatal(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brushwork::checkpoint::save_checkpoint;
use brushwork::{synth, ArchConfig, ImagePlane, ModelMeta, StyleModel};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_brushwork"));
    c.env_remove(brushwork::upsample::ENDPOINT_ENV)
        .env_remove(brushwork::loss::WEIGHTS_ENV)
        .env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let model = StyleModel::initialized(ModelMeta::untrained("Tiles", ArchConfig::tiny()), 21)
            .with_style_image(synth::brush_strokes(32, 32, 2));
        save_checkpoint(&model, f.path("model.safetensors")).unwrap();
        synth::scene(64, 48, 3).save_png(f.path("in.png")).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn gray_png(path: &Path, h: u32, w: u32, v: u8) {
    image::GrayImage::from_pixel(w, h, image::Luma([v])).save(path).unwrap();
}

#[test]
fn every_subcommand_has_help_and_unknown_flags_fail() {
    for sub in ["train", "stylize", "edit", "serve", "export"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(!o.stdout.is_empty());
    }
    assert_eq!(code(&run(&["stylize", "--bogus"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn stylize_writes_an_image_of_the_input_extent() {
    let f = Fixture::new();
    synth::scene(256, 256, 1).save_png(f.path("big.png")).unwrap();
    let args = |out: &str| {
        vec![
            "stylize".to_string(),
            "--model".into(),
            f.s("model.safetensors"),
            "--in".into(),
            f.s("big.png"),
            "--out".into(),
            f.s(out),
            "--stroke-size".into(),
            "1".into(),
            "--intensity".into(),
            "1".into(),
            "--rotation".into(),
            "0".into(),
        ]
    };
    let o = bin().args(args("a.png")).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(ImagePlane::load(f.path("a.png")).unwrap().extent(), (256, 256));
    assert_eq!(code(&bin().args(args("b.png")).output().unwrap()), 0);
    assert_eq!(std::fs::read(f.path("a.png")).unwrap(), std::fs::read(f.path("b.png")).unwrap());
}

#[test]
fn stylize_exit_codes() {
    let f = Fixture::new();
    let (m, i, o) = (f.s("model.safetensors"), f.s("in.png"), f.s("out.png"));
    let out = run(&["stylize", "--model", &m, "--in", &i, "--out", &o, "--stroke-size", "0.5"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("[1, 8]"), "{}", stderr(&out));
    assert!(!f.path("out.png").exists());

    let missing = f.s("missing.png");
    assert_eq!(code(&run(&["stylize", "--model", &m, "--in", &missing, "--out", &o])), 1);
    assert_eq!(code(&run(&["stylize", "--model", &missing, "--in", &i, "--out", &o])), 1);
    assert_eq!(code(&run(&["stylize", "--in", &i, "--out", &o])), 2);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let f = Fixture::new();
    let cfg = f.path("cfg.json");
    let body = serde_json::json!({"stylize": {"model": f.s("model.safetensors"), "stroke_size": 0.5}});
    std::fs::write(&cfg, body.to_string()).unwrap();
    let (c, i, o) = (f.s("cfg.json"), f.s("in.png"), f.s("out.png"));
    assert_eq!(code(&run(&["--config", &c, "stylize", "--in", &i, "--out", &o])), 2);
    let ok = run(&["--config", &c, "stylize", "--in", &i, "--out", &o, "--stroke-size", "2"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));

    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(code(&run(&["--config", &c, "stylize", "--in", &i, "--out", &o])), 3);
    std::fs::write(&cfg, r#"{"stylize": {"strok_size": 2}}"#).unwrap();
    assert_eq!(code(&run(&["--config", &c, "stylize", "--in", &i, "--out", &o])), 3);
}

#[test]
fn edit_with_one_hot_mask_matches_stylize() {
    let f = Fixture::new();
    gray_png(&f.path("mask.png"), 64, 48, 0);
    let (m, i) = (f.s("model.safetensors"), f.s("in.png"));
    let o = run(&["edit", "--model", &m, "--in", &i, "--levels", "2", "--mask", &f.s("mask.png"), "--mode", "final", "--out", &f.s("edit.png")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["stylize", "--model", &m, "--in", &i, "--stroke-size", "2", "--out", &f.s("plain.png")]);
    assert_eq!(code(&o), 0);
    let a = ImagePlane::load(f.path("edit.png")).unwrap();
    let b = ImagePlane::load(f.path("plain.png")).unwrap();
    // 8-bit files: a sub-1e-5 difference moves a sample by at most one step.
    assert!(a.max_abs_diff(&b) <= 1.0 / 255.0 + 1e-6);
}

#[test]
fn edit_preview_and_final_agree_on_constant_one_hot_mask() {
    let f = Fixture::new();
    gray_png(&f.path("mask.png"), 64, 48, 1);
    let (m, i, k) = (f.s("model.safetensors"), f.s("in.png"), f.s("mask.png"));
    for (mode, out) in [("preview", "p.png"), ("final", "f.png")] {
        let o = run(&["edit", "--model", &m, "--in", &i, "--levels", "1,2,4", "--mask", &k, "--mode", mode, "--out", &f.s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(f.path("p.png")).unwrap(), std::fs::read(f.path("f.png")).unwrap());
}

#[test]
fn edit_level_mask_mismatch_is_a_validation_error() {
    let f = Fixture::new();
    for name in ["p0.png", "p1.png", "p2.png"] {
        gray_png(&f.path(name), 64, 48, 255);
    }
    let (m, i) = (f.s("model.safetensors"), f.s("in.png"));
    let o = run(&[
        "edit", "--model", &m, "--in", &i, "--levels", "1,2", "--mask", &f.s("p0.png"), "--mask", &f.s("p1.png"),
        "--mask", &f.s("p2.png"), "--out", &f.s("o.png"),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    // A label map pointing at a level that does not exist.
    gray_png(&f.path("labels.png"), 64, 48, 5);
    let o = run(&["edit", "--model", &m, "--in", &i, "--levels", "1,2", "--mask", &f.s("labels.png"), "--out", &f.s("o.png")]);
    assert_eq!(code(&o), 2);
    let o = run(&["edit", "--model", &m, "--in", &i, "--levels", "2,1", "--mask", &f.s("p0.png"), "--out", &f.s("o.png")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn export_contract() {
    let f = Fixture::new();
    let (i, s) = (f.s("in.png"), f.s("in.png"));
    let o = run(&["export", "--in", &i, "--style", &s, "--scale", "1", "--backend", "local", "--out", &f.s("same.png")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(f.path("in.png")).unwrap(), std::fs::read(f.path("same.png")).unwrap());

    synth::scene(512, 512, 4).save_png(f.path("512.png")).unwrap();
    let o = run(&["export", "--in", &f.s("512.png"), "--scale", "2", "--out", &f.s("1024.png")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(ImagePlane::load(f.path("1024.png")).unwrap().extent(), (1024, 1024));

    let o = run(&["export", "--in", &i, "--style", &s, "--scale", "2", "--backend", "remote", "--out", &f.s("r.png")]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = run(&["export", "--in", &i, "--scale", "0.5", "--out", &f.s("r.png")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_runs_end_to_end_and_needs_an_extractor() {
    let f = Fixture::new();
    synth::write_corpus(f.path("data"), 4, 40, 9).unwrap();
    synth::brush_strokes(48, 48, 1).save_png(f.path("style.png")).unwrap();
    let common = [
        "train", "--style", &f.s("style.png"), "--data", &f.s("data"), "--out-dir", &f.s("ckpt"), "--arch", "tiny",
        "--epochs", "1", "--batch-size", "2", "--crop-size", "32",
    ];
    let o = run(&common);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let mut args = common.to_vec();
    args.extend(["--random-extractor", "0"]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed = String::from_utf8(o.stdout.clone()).unwrap();
    let ckpt = PathBuf::from(printed.trim());
    assert_eq!(ckpt, f.path("ckpt/style.safetensors"));
    let model = brushwork::load_checkpoint(&ckpt).unwrap();
    assert_eq!(model.meta().style_name, "style");
    assert_eq!(stderr(&o).matches("step ").count(), 2);

    let mut bad = common.to_vec();
    bad.extend(["--random-extractor", "0", "--batch-size", "0"]);
    assert_eq!(code(&run(&bad)), 2);
}

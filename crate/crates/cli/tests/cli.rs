use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn save(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_save"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    stdout(&o)
}

const TINY: &str = "\
# tiny end-to-end run
model.h = 8
model.w = 8
model.d = 8
model.blocks = 1
pretrain.steps = 3
pretrain.batch_size = 2
train.epochs = 2
sample.steps = 4
sample.s_cfg = 1
paths.checkpoint = image.ckpt
paths.corpus = data/corpus/manifest.txt
paths.video_in = data/video.clip
paths.video_out = out/edit.clip
";

#[test]
fn flops_reports_the_three_layouts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(save(dir.path(), &["flops"]));
    assert!(a.contains("spatio-temporal attention_c=16384 total=2097152"), "{a}");
    assert!(a.contains("sparse-causal+temporal attention_c=16384 total=655360"), "{a}");
    assert!(a.contains("frame+temporal attention_c=16384 total=393216"), "{a}");
    assert_eq!(a, ok(save(dir.path(), &["flops"])));
}

#[test]
fn params_reproduces_the_reduction_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(save(dir.path(), &["params", "--layer", "256x3200"]));
    assert!(out.contains("full=819200 save=256 lora_r1=3456 ratio=3200"), "{out}");
    let model = ok(save(dir.path(), &["params"]));
    assert_eq!(model.lines().filter(|l| l.starts_with("layer ")).count(), 6, "{model}");
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "train.lr = 1e-3\ntrain.nonsense = 4\n").unwrap();
    let o = save(dir.path(), &["--config", "bad.cfg", "flops"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 2") && err.contains("train.nonsense"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    for args in [
        &["--train.bogus", "1", "flops"][..],
        &["--train.lr", "fast", "flops"],
        &["--model.d", "7", "params"],
        &["params", "--layer", "12by4"],
        &["no-such-command"],
        &["edit", "--source", "red square", "--target", "purple square"],
    ] {
        let o = save(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
    assert_eq!(save(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_with_two_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = save(dir.path(), &["--paths.checkpoint", "nowhere.ckpt", "roundtrip"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.ckpt"), "{}", stderr(&o));
    let o = save(dir.path(), &["export-ppm", "--clip", "gone.clip", "--out", "frames"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gone.clip"));
}

#[test]
fn lsg_verify_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--seed", "5", "lsg-verify", "--trials", "100", "--csv", "bound.csv"];
    let a = ok(save(dir.path(), &args));
    let csv = fs::read_to_string(dir.path().join("bound.csv")).unwrap();
    assert!(a.starts_with("# singular-value deviation bound: 100 trials"), "{a}");
    assert!(csv.starts_with("n,deviation,bound_eq4,holds_eq4,bound_proof,holds_proof\n"));
    assert_eq!(csv.lines().count(), 33);
    assert_eq!(a, ok(save(dir.path(), &args)));
    assert_eq!(csv, fs::read_to_string(dir.path().join("bound.csv")).unwrap());
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let cfg = ["--config", "tiny.cfg"];
    let run = |extra: &[&str]| ok(save(d, &[&cfg[..], extra].concat()));

    let shown = run(&["--show-config", "render-data", "--per-pair", "1", "--frames", "2", "--size", "4"]);
    assert!(shown.contains("model.h = 8"));
    assert!(shown.contains("corpus: 12 clips"), "{shown}");
    assert!(d.join("data/corpus/img_0011.clip").exists());
    assert!(d.join("data/video.clip").exists());

    let pre = run(&["pretrain"]);
    assert!(pre.contains("pretrained 3 steps on 12 clips"), "{pre}");
    let curve = fs::read_to_string(d.join("image.ckpt.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    run(&["inflate", "--out", "video.ckpt"]);
    let o = save(d, &[&cfg[..], &["--paths.checkpoint", "video.ckpt", "inflate", "--out", "twice.ckpt"]].concat());
    assert_eq!(o.status.code(), Some(2), "inflating twice must fail");

    let tuned = run(&["--paths.checkpoint", "video.ckpt", "finetune", "--prompt", "red square right", "--out", "save.ckpt", "--table", "cmp.tsv"]);
    assert!(tuned.starts_with("mode=save tunable=128 "), "{tuned}");
    let lora = run(&[
        "--paths.checkpoint",
        "video.ckpt",
        "--train.tuning",
        "lora",
        "finetune",
        "--out",
        "lora.ckpt",
        "--table",
        "cmp.tsv",
    ]);
    assert!(lora.starts_with("mode=lora tunable=152 "), "{lora}");
    let table = fs::read_to_string(d.join("cmp.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "mode\ttunable\tfinal_loss\trecon_mse\twall_s");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("save\t128\t") && rows[2].starts_with("lora\t152\t"));

    // Same config and seed: bit-identical checkpoint.
    run(&["--paths.checkpoint", "video.ckpt", "finetune", "--out", "again.ckpt", "--table", "cmp.tsv"]);
    assert_eq!(fs::read(d.join("save.ckpt")).unwrap(), fs::read(d.join("again.ckpt")).unwrap());
    run(&["--paths.checkpoint", "video.ckpt", "--seed", "9", "finetune", "--out", "other.ckpt", "--table", "cmp.tsv"]);
    assert_ne!(fs::read(d.join("save.ckpt")).unwrap(), fs::read(d.join("other.ckpt")).unwrap());

    let e = run(&["--paths.checkpoint", "save.ckpt", "edit", "--source", "red square right", "--target", "red square right", "--ppm", "frames"]);
    assert!(e.contains("mse_vs_input="), "{e}");
    assert!(d.join("out/edit.clip").exists());
    assert!(d.join("frames/edit_001.ppm").exists());

    let rt = run(&["--paths.checkpoint", "save.ckpt", "roundtrip"]);
    assert!(rt.starts_with("latent_mse="), "{rt}");

    let ex = run(&["export-ppm", "--clip", "data/video.clip", "--out", "ppm", "--stem", "v"]);
    assert!(ex.contains("wrote 2 frames"));
    let ppm = fs::read(d.join("ppm/v_000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
}

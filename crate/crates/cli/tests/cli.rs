use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;
use velofcn::detector::{detections_csv, Detection};
use velofcn::kittio::Dataset;

const TOY: &str = "\
projection.delta_theta_deg = 0.4
projection.delta_phi_deg = 0.8
projection.theta_deg = -25.6,25.6
projection.phi_deg = -22.4,3.2
network.channels = 8,16,32
";

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("toy.cfg"), TOY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_velofcn"))
            .args(args)
            .env("VELOFCN_CONFIG", self.path("toy.cfg"))
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn synth(&self, count: usize, seed: u64, dir: &str) {
        self.ok(&["synth", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out-dir", dir]);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["velodyne", "label_2", "calib"] {
        for f in files(&dir.join(sub)) {
            out.push((format!("{sub}/{f}"), fs::read(dir.join(sub).join(&f)).unwrap()));
        }
    }
    out.push(("manifest.txt".into(), fs::read(dir.join("manifest.txt")).unwrap()));
    out
}

fn loss_totals(path: &Path) -> Vec<(usize, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn synth_writes_requested_scans() {
    let env = Env::new();
    env.synth(5, 7, "d");
    assert_eq!(files(&env.path("d/velodyne")).len(), 5);
    assert_eq!(files(&env.path("d/label_2")).len(), 5);
    assert_eq!(fs::read_to_string(env.path("d/manifest.txt")).unwrap().lines().count(), 5);
}

#[test]
fn synth_same_seed_same_bytes() {
    let env = Env::new();
    env.synth(3, 7, "a");
    env.synth(3, 7, "b");
    env.synth(3, 8, "c");
    assert_eq!(tree_bytes(&env.path("a")), tree_bytes(&env.path("b")));
    assert_ne!(tree_bytes(&env.path("a")), tree_bytes(&env.path("c")));
}

#[test]
fn synth_zero_count() {
    let env = Env::new();
    env.synth(0, 1, "e");
    assert!(files(&env.path("e/velodyne")).is_empty());
    assert_eq!(fs::read_to_string(env.path("e/manifest.txt")).unwrap(), "");
}

#[test]
fn resolved_config_is_written() {
    let env = Env::new();
    env.ok(&["--set", "synth.clutter=2", "synth", "--count", "1", "--seed", "4", "--out-dir", "d"]);
    let text = fs::read_to_string(env.path("d/config.txt")).unwrap();
    assert!(text.contains("synth.clutter = 2"));
    assert!(text.contains("train.seed = 4"));
    assert!(text.contains("projection.delta_theta_deg = 0.4"));
    // feeding the written config back reproduces the dataset
    Command::new(env!("CARGO_BIN_EXE_velofcn"))
        .args(["--config", "d/config.txt", "synth", "--count", "1", "--out-dir", "again"])
        .env_remove("VELOFCN_CONFIG")
        .current_dir(env.dir.path())
        .output()
        .unwrap();
    assert_eq!(tree_bytes(&env.path("d")), tree_bytes(&env.path("again")));
}

#[test]
fn usage_errors_exit_1() {
    let env = Env::new();
    assert_eq!(code(&env.run(&[])), 1);
    assert_eq!(code(&env.run(&["frobnicate"])), 1);
    assert_eq!(code(&env.run(&["synth", "--count", "many", "--out-dir", "x"])), 1);
    assert_eq!(code(&env.run(&["--set", "no.such.key=1", "gradcheck"])), 1);
    assert_eq!(code(&env.run(&["--config", "missing.cfg", "gradcheck"])), 1);
    assert_eq!(code(&env.run(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let env = Env::new();
    env.synth(1, 1, "d");
    let out = env.run(&["detect", "--checkpoint", "nope.ckpt", "--data-dir", "d", "--out-dir", "det"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
    assert_eq!(code(&env.run(&["render", "scan", "--data-dir", "d", "--id", "42", "--out", "x.ppm"])), 2);
    fs::write(env.path("d/velodyne/000000.bin"), [0u8; 7]).unwrap();
    assert_eq!(code(&env.run(&["render", "scan", "--data-dir", "d", "--id", "000000", "--out", "x.ppm"])), 2);
}

#[test]
fn gradcheck_passes_and_reports_layers() {
    let env = Env::new();
    let out = env.ok(&["gradcheck"]);
    for layer in ["conv1", "conv2", "conv3", "deconv4", "deconv5a", "deconv5b", "deconv6a", "deconv6b"] {
        assert_eq!(out.matches(layer).count(), 2, "{layer} in\n{out}");
    }
    assert!(out.contains("max rel err"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn gradcheck_catches_corrupted_backward() {
    let env = Env::new();
    let out = env.run(&["gradcheck", "--corrupt-layer", "conv3"]);
    assert_eq!(code(&out), 3);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let failing: Vec<&str> = stdout.lines().filter(|l| l.contains("FAIL")).collect();
    assert_eq!(failing.len(), 2);
    assert!(failing.iter().all(|l| l.contains("conv3")));
}

#[test]
fn render_scan_nonzero_at_occupied_cells() {
    let env = Env::new();
    env.synth(1, 2, "d");
    env.ok(&["render", "scan", "--data-dir", "d", "--id", "000000", "--out", "s.ppm"]);
    let bytes = fs::read(env.path("s.ppm")).unwrap();
    let header = b"P6\n128 32\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let pixels = &bytes[header.len()..];
    assert_eq!(pixels.len(), 128 * 32 * 3);

    // occupied cells counted independently from the raw points
    let raw = fs::read(env.path("d/velodyne/000000.bin")).unwrap();
    let mut occupied = std::collections::HashSet::new();
    for c in raw.chunks_exact(16) {
        let v: Vec<f64> = (0..3)
            .map(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64)
            .collect();
        let theta = v[1].atan2(v[0]).to_degrees();
        let phi = v[2].atan2(v[0].hypot(v[1])).to_degrees();
        let col = ((theta + 25.6) / 0.4).floor();
        let row = ((phi + 22.4) / 0.8).floor();
        if (0.0..128.0).contains(&col) && (0.0..32.0).contains(&row) {
            occupied.insert((row as usize, col as usize));
        }
    }
    let lit: std::collections::HashSet<_> = (0..32 * 128)
        .filter(|i| pixels[3 * i] != 0)
        .map(|i| (31 - i / 128, i % 128))
        .collect();
    assert_eq!(lit, occupied);
}

/// Digest of `render scan` for scan 0 of seed 11 under the toy window.
const GOLDEN_SCAN_SHA256: &str = "d02710adf9802cedd42e77476a28c0f999fd481b849c60d59c850f0ec50af3a6";

#[test]
fn render_scan_golden() {
    let env = Env::new();
    env.synth(1, 11, "d");
    env.ok(&["render", "scan", "--data-dir", "d", "--id", "000000", "--out", "g.ppm"]);
    let digest = Sha256::digest(fs::read(env.path("g.ppm")).unwrap());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, GOLDEN_SCAN_SHA256);
}

#[test]
fn train_detect_eval_render() {
    let env = Env::new();
    env.synth(5, 3, "data");
    let fast = ["--set", "train.optimizer=adam", "--set", "train.learning_rate=0.001"];
    let mut args: Vec<&str> = fast.to_vec();
    args.extend(["--set", "train.iterations=600", "train", "--data-dir", "data", "--out-dir", "run"]);
    env.ok(&args);
    let losses = loss_totals(&env.path("run/loss.csv"));
    assert_eq!(losses.len(), 600);
    assert_eq!(losses[0].0, 0);
    let mean = |s: &[(usize, f64)]| s.iter().map(|x| x.1).sum::<f64>() / s.len() as f64;
    assert!(mean(&losses[500..]) < 0.5 * mean(&losses[..100]));
    let cfg = fs::read_to_string(env.path("run/config.txt")).unwrap();
    assert!(!cfg.contains("loss.n_bar = auto"));

    // resume continues numbering and appends to the log
    let mut args: Vec<&str> = fast.to_vec();
    args.extend(["--set", "train.iterations=650", "train", "--data-dir", "data", "--out-dir", "run", "--resume"]);
    env.ok(&args);
    let resumed = loss_totals(&env.path("run/loss.csv"));
    assert_eq!(resumed.len(), 650);
    assert!(resumed.iter().enumerate().all(|(i, (it, _))| *it == i));

    env.ok(&["detect", "--checkpoint", "run/model.ckpt", "--data-dir", "data", "--out-dir", "det"]);
    env.ok(&["detect", "--checkpoint", "run/model.ckpt", "--data-dir", "data", "--out-dir", "det2"]);
    for f in files(&env.path("det")) {
        assert_eq!(fs::read(env.path("det").join(&f)).unwrap(), fs::read(env.path("det2").join(&f)).unwrap());
    }
    assert_eq!(files(&env.path("det")).iter().filter(|f| f.ends_with(".csv")).count(), 5);

    let report = env.ok(&["eval", "--detections", "det", "--groundtruth", "data", "--out-dir", "ev"]);
    assert_eq!(report.lines().next().unwrap(), "criterion,difficulty,AP,AOS,max_recall");
    assert_eq!(report.lines().filter(|l| l.starts_with("world,")).count(), 3);
    assert_eq!(report.lines().filter(|l| l.starts_with("image,")).count(), 3);
    let pr = fs::read_to_string(env.path("ev/pr_world_easy.csv")).unwrap();
    assert_eq!(pr.lines().next().unwrap(), "confidence,precision,recall,similarity");

    env.ok(&["render", "confidence", "--checkpoint", "run/model.ckpt", "--data-dir", "data", "--id", "000002", "--out", "c.ppm"]);
    assert!(fs::read(env.path("c.ppm")).unwrap().starts_with(b"P6\n128 32\n255\n"));
    env.ok(&["render", "detections", "--data-dir", "data", "--id", "000002", "--detections", "det", "--out", "b.ppm"]);
    assert!(fs::read(env.path("b.ppm")).unwrap().starts_with(b"P6\n480 480\n255\n"));
}

#[test]
fn zero_learning_rate_leaves_checkpoint_unchanged() {
    let env = Env::new();
    env.synth(2, 5, "data");
    let base = ["--set", "train.iterations=20", "train", "--data-dir", "data"];
    let mut a: Vec<&str> = vec!["--set", "train.learning_rate=0"];
    a.extend(base);
    a.extend(["--out-dir", "lr0"]);
    env.ok(&a);
    env.ok(&["--set", "train.iterations=0", "train", "--data-dir", "data", "--out-dir", "init"]);
    assert_eq!(fs::read(env.path("lr0/model.ckpt")).unwrap(), fs::read(env.path("init/model.ckpt")).unwrap());
}

#[test]
fn rerun_from_written_config_is_bit_identical() {
    let env = Env::new();
    env.synth(2, 9, "data");
    env.ok(&["--set", "train.iterations=30", "train", "--data-dir", "data", "--out-dir", "a"]);
    let out = Command::new(env!("CARGO_BIN_EXE_velofcn"))
        .args(["--config", "a/config.txt", "train", "--data-dir", "data", "--out-dir", "b"])
        .env_remove("VELOFCN_CONFIG")
        .current_dir(env.dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(env.path("a/model.ckpt")).unwrap(), fs::read(env.path("b/model.ckpt")).unwrap());
    assert_eq!(fs::read(env.path("a/loss.csv")).unwrap(), fs::read(env.path("b/loss.csv")).unwrap());
}

#[test]
fn eval_perfect_and_empty_detections() {
    let env = Env::new();
    env.synth(3, 6, "data");
    fs::create_dir(env.path("perfect")).unwrap();
    fs::create_dir(env.path("empty")).unwrap();
    let ds = Dataset::open(&env.path("data")).unwrap();
    for id in &ds.ids {
        let frame = ds.load(id).unwrap();
        let dets: Vec<Detection> = frame
            .objects
            .iter()
            .enumerate()
            .map(|(k, o)| Detection {
                bbox: o.bbox,
                score: 9,
                confidence: 0.9 - 0.01 * k as f64,
                cell: (0, 0),
            })
            .collect();
        fs::write(env.path(&format!("perfect/{id}.csv")), detections_csv(id, &dets)).unwrap();
    }
    for criterion in ["world", "image"] {
        let report = env.ok(&["eval", "--criterion", criterion, "--detections", "perfect", "--groundtruth", "data", "--out-dir", "p"]);
        assert_eq!(report.lines().count(), 4);
        for line in report.lines().skip(1) {
            assert!(line.starts_with(criterion));
            assert!(line.ends_with(",1,1,1"), "{line}");
        }
    }
    let report = env.ok(&["eval", "--criterion", "world", "--detections", "empty", "--groundtruth", "data", "--out-dir", "q"]);
    for line in report.lines().skip(1) {
        assert!(line.ends_with(",0,0,0"), "{line}");
    }
}

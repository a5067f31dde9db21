use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: &str = "\
[synth]
num_users = 12
num_images = 200
[stage1]
epochs = 3
[meta]
iterations = 40
validation_every = 20
validation_tasks = 5
[eval]
num_tasks = 10
[ablation]
k_max = 20
";

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("small.toml");
        let data = root.join("data");
        std::fs::write(
            &config,
            format!("{SMALL}[data]\ndir = {:?}\n", data.to_str().unwrap()),
        )
        .unwrap();
        Self {
            _dir: dir,
            root,
            config,
        }
    }

    fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    /// Runs with this workspace's config, writing into `out/` unless
    /// `--out` is given.
    fn run(&self, args: &[&str]) -> Output {
        let mut full: Vec<String> = vec!["--config".into(), self.config.to_str().unwrap().into()];
        if !args.contains(&"--out") {
            full.extend(["--out".into(), self.out().to_str().unwrap().into()]);
        }
        full.extend(args.iter().map(|s| s.to_string()));
        metafbp(&full)
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

    fn with_data(self) -> Self {
        let data = self.data();
        self.ok(&["--out", data.to_str().unwrap(), "gen-data"]);
        self
    }

    fn with_extractor(self) -> Self {
        let ws = self.with_data();
        ws.ok(&["stage1"]);
        ws
    }
}

fn metafbp<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metafbp"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(String::from)
        .collect()
}

#[test]
fn gen_data_with_defaults_is_fast_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = std::time::Instant::now();
    for d in [&a, &b] {
        let out = metafbp(&["--out", d.to_str().unwrap(), "gen-data"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert!(start.elapsed().as_secs() < 20);
    for name in ["features.csv", "ratings.csv", "truth.json"] {
        assert_eq!(digest(&a.join(name)), digest(&b.join(name)), "{name}");
    }
    let c = dir.path().join("c");
    metafbp(&[
        "--out",
        c.to_str().unwrap(),
        "--set",
        "synth.seed=9",
        "gen-data",
    ]);
    assert_ne!(
        digest(&a.join("ratings.csv")),
        digest(&c.join("ratings.csv"))
    );
}

#[test]
fn invalid_config_exits_with_code_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = metafbp(&[
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "synth.missing_rate=1.0",
        "gen-data",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("synth.missing_rate"),
        "{}",
        stderr(&out)
    );

    let out = metafbp(&["--set", "meta.no_such_key=3", "show-config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no_such_key"), "{}", stderr(&out));

    let out = metafbp(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_extractor_is_a_data_error() {
    let ws = Workspace::new().with_data();
    let out = ws.run(&["meta-train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("stage1"), "{}", stderr(&out));
}

#[test]
fn corrupted_model_is_rejected() {
    let ws = Workspace::new().with_extractor();
    let path = ws.out().join("extractor.model");
    let text = std::fs::read_to_string(&path).unwrap();
    let pos = text.find("segment").unwrap();
    let line_end = pos + text[pos..].find('\n').unwrap();
    let mut bytes = text.into_bytes();
    // Change the first digit of the first value row.
    let digit = line_end
        + 1
        + bytes[line_end + 1..]
            .iter()
            .position(u8::is_ascii_digit)
            .unwrap();
    bytes[digit] = if bytes[digit] == b'7' { b'8' } else { b'7' };
    std::fs::write(&path, bytes).unwrap();
    let out = ws.run(&["meta-train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

#[test]
fn zero_lambda_makes_adaptation_inert() {
    let ws = Workspace::new().with_extractor();
    ws.ok(&["--set", "meta.high_order.lambda=0.0", "meta-train"]);
    let model = ws.out().join("metafbp.model");
    let m = model.to_str().unwrap();
    let (a, b) = (ws.root.join("a"), ws.root.join("b"));
    ws.ok(&["--out", a.to_str().unwrap(), "eval", "--model", m]);
    ws.ok(&[
        "--out",
        b.to_str().unwrap(),
        "--set",
        "eval.alpha=0.5",
        "--set",
        "eval.k=3",
        "eval",
        "--model",
        m,
    ]);
    // Every column except the recorded step count.
    let without_k = |p: &Path| -> Vec<String> {
        data_rows(p)
            .iter()
            .map(|r| {
                let mut f: Vec<&str> = r.split(',').collect();
                f.remove(6);
                f.join(",")
            })
            .collect()
    };
    let rows_a = without_k(&a.join("eval_metafbp_tasks.csv"));
    let rows_b = without_k(&b.join("eval_metafbp_tasks.csv"));
    assert_eq!(rows_a.len(), 10);
    assert_eq!(rows_a, rows_b);
}

#[test]
fn training_runs_emit_curves_and_cross_shot_reports() {
    let ws = Workspace::new().with_extractor();
    ws.ok(&["--set", "meta.shots.support=1", "meta-train"]);
    let curve = data_rows(&ws.out().join("metafbp_curve.csv"));
    assert!(!curve.is_empty());
    let model = ws.out().join("metafbp.model");
    ws.ok(&["cross-shot", "--model", model.to_str().unwrap()]);
    for n in [1, 5, 10] {
        assert!(ws.out().join(format!("cross_shot_{n}.json")).exists());
        assert!(ws.out().join(format!("cross_shot_{n}_tasks.csv")).exists());
    }
    assert_eq!(data_rows(&ws.out().join("cross_shot.csv")).len(), 3);

    ws.ok(&["ablate-k", "--model", model.to_str().unwrap()]);
    let rows = data_rows(&ws.out().join("ablate_k.csv"));
    assert_eq!(rows.len(), 21);
    assert!(rows[0].starts_with("0,") && rows[20].starts_with("20,"));
}

#[test]
fn lambda_ablation_has_one_row_per_value() {
    let ws = Workspace::new().with_extractor();
    ws.ok(&[
        "--set",
        "meta.iterations=10",
        "--set",
        "meta.validation_every=5",
        "ablate-lambda",
    ]);
    let rows = data_rows(&ws.out().join("ablate_lambda.csv"));
    assert_eq!(rows.len(), 5);
    let lambdas: Vec<f64> = rows
        .iter()
        .map(|r| r.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(lambdas, [1.0, 0.1, 0.01, 0.001, 0.0001]);
}

#[test]
fn gradcheck_passes_and_detects_an_injected_fault() {
    let out = metafbp(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("meta.metafbp.tuning.generator"));
    let out = metafbp(&["gradcheck", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn commands_leave_their_inputs_untouched() {
    let ws = Workspace::new().with_extractor();
    let inputs = [
        ws.data().join("features.csv"),
        ws.data().join("ratings.csv"),
        ws.config.clone(),
        ws.out().join("extractor.model"),
    ];
    let before: Vec<String> = inputs.iter().map(|p| digest(p)).collect();
    ws.ok(&["meta-train"]);
    let model = ws.out().join("metafbp.model");
    ws.ok(&["eval", "--model", model.to_str().unwrap()]);
    let after: Vec<String> = inputs.iter().map(|p| digest(p)).collect();
    assert_eq!(before, after);
}

#[test]
fn show_config_reads_the_config_embedded_in_an_artifact() {
    let ws = Workspace::new().with_extractor();
    let direct = ws.ok(&["--set", "meta.high_order.lambda=0.25", "show-config"]);
    ws.ok(&["--set", "meta.high_order.lambda=0.25", "meta-train"]);
    for artifact in ["metafbp.model", "metafbp_curve.csv"] {
        let path = ws.out().join(artifact);
        let out = metafbp(&["--config", path.to_str().unwrap(), "show-config"]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert_eq!(String::from_utf8(out.stdout).unwrap(), direct, "{artifact}");
    }
    assert!(direct.contains("lambda = 0.25"));
}

#[test]
fn users_missing_a_category_are_listed_in_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let mut features = String::new();
    let mut ratings = String::new();
    for i in 0..40 {
        features.push_str(&format!("img{i},{},{}\n", i as f64 / 40.0, (i % 7) as f64));
    }
    for u in 0..10 {
        for i in 0..40 {
            // u9 never uses the top score.
            let score = if u == 9 { i % 4 + 1 } else { i % 5 + 1 };
            ratings.push_str(&format!("u{u},img{i},{score}\n"));
        }
    }
    std::fs::write(data.join("features.csv"), features).unwrap();
    std::fs::write(data.join("ratings.csv"), ratings).unwrap();
    let out = metafbp(&[
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--set",
        &format!("data.dir={:?}", data.to_str().unwrap()),
        "--set",
        "data.remap=[]",
        "--set",
        "stage1.epochs=1",
        "stage1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let audit = data_rows(&dir.path().join("out/excluded_users.csv"));
    assert_eq!(audit, ["u9"]);
}

#[test]
fn default_config_round_trips() {
    let out = metafbp(&["default-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("# published setting"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.toml");
    std::fs::write(&path, &text).unwrap();
    let shown = metafbp(&["--config", path.to_str().unwrap(), "show-config"]);
    assert!(shown.status.success(), "{}", stderr(&shown));
    let plain = metafbp(&["show-config"]);
    assert_eq!(shown.stdout, plain.stdout);
}

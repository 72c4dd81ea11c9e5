use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scalesearch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn scalesearch")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Toy {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let out = run(&["gen-toy", "--out", p(&root), "--seed", "7", "--samples", "12"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn calibrate(&self, method: &str, bits: &str, out: &str, extra: &[&str]) -> Output {
        let model = self.path("model.toml");
        let data = self.path("calib");
        let scales = self.path(out);
        let mut args = vec![
            "calibrate",
            "--model",
            p(&model),
            "--data",
            p(&data),
            "--bits",
            bits,
            "--method",
            method,
            "--grid",
            "5",
            "--out",
            p(&scales),
        ];
        if !extra.contains(&"--samples") {
            args.extend_from_slice(&["--samples", "4"]);
        }
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 1x3x12x12 f32 tensor file filled with `value`, written byte by byte.
fn constant_input(path: &Path, value: f32) {
    let mut bytes = b"EQTN".to_vec();
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.push(0);
    bytes.push(4);
    for d in [1u32, 3, 12, 12] {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for _ in 0..3 * 12 * 12 {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn calibrate_writes_scales_and_report() {
    let toy = Toy::new();
    for method in ["eq", "kld", "maxabs"] {
        let out = toy.calibrate(method, "7", &format!("{method}.toml"), &[]);
        assert_eq!(code(&out), 0, "{method}: {}", String::from_utf8_lossy(&out.stderr));
        let scales = fs::read_to_string(toy.path(&format!("{method}.toml"))).unwrap();
        assert!(scales.contains(&format!("method = \"{method}\"")));
        let report = fs::read_to_string(toy.path(&format!("{method}.csv"))).unwrap();
        let mut lines = report.lines();
        assert_eq!(
            lines.next(),
            Some("layer,method,bits,mean_cosine_before,mean_cosine_after,wall_time_s")
        );
        assert_eq!(lines.count(), 3);
    }
}

#[test]
fn reruns_are_bit_identical() {
    let toy = Toy::new();
    assert_eq!(code(&toy.calibrate("eq", "6", "a.toml", &["--seed", "3"])), 0);
    assert_eq!(code(&toy.calibrate("eq", "6", "b.toml", &["--seed", "3"])), 0);
    assert_eq!(
        fs::read(toy.path("a.toml")).unwrap(),
        fs::read(toy.path("b.toml")).unwrap()
    );

    let sweep = |name: &str| {
        let csv = toy.path(name);
        let out = run(&[
            "sweep",
            "--model",
            p(&toy.path("model.toml")),
            "--data",
            p(&toy.path("calib")),
            "--bits-from",
            "6",
            "--bits-to",
            "8",
            "--methods",
            "maxabs,kld",
            "--samples",
            "4",
            "--out",
            p(&csv),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(csv).unwrap()
    };
    let first = sweep("s1.csv");
    assert_eq!(first, sweep("s2.csv"));
    assert!(
        first.starts_with("bits,method,mean_final_cosine,group_size_w16,macs_per_output,widenings_per_output_w16\n")
    );
    assert_eq!(first.lines().count(), 7);
}

#[test]
fn infer_and_eval() {
    let toy = Toy::new();
    assert_eq!(code(&toy.calibrate("maxabs", "8", "s.toml", &[])), 0);
    let model = toy.path("model.toml");
    let scales = toy.path("s.toml");
    let input = toy.path("calib/sample_0000.eqtn");
    for (engine, width) in [("fp32", "16"), ("int", "16"), ("int", "32")] {
        let out_path = toy.path(&format!("{engine}{width}.eqtn"));
        let out = run(&[
            "infer",
            "--model",
            p(&model),
            "--scales",
            p(&scales),
            "--input",
            p(&input),
            "--engine",
            engine,
            "--acc-width",
            width,
            "--out",
            p(&out_path),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    // At b=8 the widths share the same integers, so the files match exactly.
    assert_eq!(
        fs::read(toy.path("int16.eqtn")).unwrap(),
        fs::read(toy.path("int32.eqtn")).unwrap()
    );

    let out = run(&[
        "eval",
        "--model",
        p(&model),
        "--scales",
        p(&scales),
        "--data",
        p(&toy.path("calib")),
        "--samples",
        "4",
    ]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("layer,kind,mean_cosine\n0,conv2d,"));
    let last: f64 = text
        .lines()
        .last()
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(last > 0.9 && last <= 1.0, "{last}");
}

#[test]
fn exit_codes() {
    let toy = Toy::new();
    // 2: usage.
    assert_eq!(code(&toy.calibrate("eq", "9", "x.toml", &[])), 2);
    assert_eq!(code(&toy.calibrate("eq", "7", "x.toml", &["--alpha", "1.5"])), 2);
    let out = run(&[
        "sweep",
        "--model",
        p(&toy.path("model.toml")),
        "--data",
        p(&toy.path("calib")),
        "--methods",
        "",
    ]);
    assert_eq!(code(&out), 2);
    // 3: data and parse errors.
    assert_eq!(code(&toy.calibrate("maxabs", "7", "x.toml", &["--samples", "500"])), 3);
    fs::write(toy.path("broken.toml"), "input_shape = [1, 3]\nlayers = 5\n").unwrap();
    let out = run(&[
        "eval",
        "--model",
        p(&toy.path("broken.toml")),
        "--scales",
        p(&toy.path("x.toml")),
        "--data",
        p(&toy.path("calib")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    // 4: a 16-bit partial sum overflows under an unsafe forced grouping.
    assert_eq!(code(&toy.calibrate("maxabs", "8", "s8.toml", &[])), 0);
    let big = toy.path("big.eqtn");
    constant_input(&big, 1000.0);
    let (model, scales) = (toy.path("model.toml"), toy.path("s8.toml"));
    let infer = |extra: &[&str]| {
        let out_path = toy.path("o.eqtn");
        let mut args = vec![
            "infer",
            "--model",
            p(&model),
            "--scales",
            p(&scales),
            "--input",
            p(&big),
            "--out",
            p(&out_path),
        ];
        args.extend_from_slice(extra);
        code(&run(&args))
    };
    assert_eq!(infer(&[]), 0);
    assert_eq!(infer(&["--force-group", "100000"]), 4);
    assert_eq!(infer(&["--force-group", "100000", "--overflow", "saturate"]), 0);
    // 5: budget exhausted; the partial result is still written.
    let out = toy.calibrate("eq", "7", "budget.toml", &["--time-budget", "0"]);
    assert_eq!(code(&out), 5);
    assert!(toy.path("budget.toml").exists());
}

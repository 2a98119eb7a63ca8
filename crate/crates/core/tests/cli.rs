use std::path::Path;
use std::process::{Command, Output};

fn moose(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moose"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# small enough to train in seconds
frames = 2
width = 16
height = 16
patch = 8
spatial_dim = 8
spatial_layers = 1
spatial_heads = 2
temporal_dim = 4
temporal_layers = 1
temporal_heads = 2
blob_radius = 3
clips_per_class = 6
epochs = 3
batch_size = 4
seed = 5
data = data
out = run
";

#[test]
fn generate_train_eval_viz_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("tiny.cfg"), TINY).unwrap();

    let g = moose(&["generate", "--config", "tiny.cfg"], root);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    assert!(root.join("data/manifest.csv").is_file());

    let t = moose(&["train", "--config", "tiny.cfg"], root);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let metrics = std::fs::read_to_string(root.join("run/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,train_loss,train_top1,val_top1,val_top5,lr")
    );
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 3);

    // The checkpoint is the best epoch; eval must reproduce its val_top1.
    let best = stdout(&t)
        .lines()
        .last()
        .and_then(|l| l.split(" at epoch ").nth(1))
        .and_then(|s| s.split(';').next())
        .map(|s| s.parse::<usize>().unwrap())
        .expect("summary line");
    let e = moose(
        &[
            "eval",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "run/checkpoint",
            "--split",
            "val",
        ],
        root,
    );
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let top1 = stdout(&e)
        .lines()
        .find_map(|l| l.strip_prefix("top1: ").map(String::from))
        .unwrap();
    assert_eq!(top1, rows[best][3]);

    let v = moose(
        &[
            "viz",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "run/checkpoint",
            "--clip",
            "move_up_00000",
            "--out",
            "viz",
        ],
        root,
    );
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stderr));
    assert!(root.join("viz/move_up_00000/frame_0_spatial.ppm").is_file());
    assert!(root.join("viz/move_up_00000/meta.csv").is_file());

    let f = moose(
        &[
            "flops",
            "--config",
            "tiny.cfg",
            "--fusion",
            "flow_prior",
            "--agg",
            "mean",
        ],
        root,
    );
    assert!(f.status.success());
    let text = stdout(&f);
    assert!(
        text.starts_with("params: ") && text.contains("\nmacs: "),
        "{text}"
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // Missing required flag: usage error.
    assert_eq!(moose(&["eval"], root).status.code(), Some(2));
    // Unknown flag value rejected by the parser.
    assert_eq!(
        moose(&["flops", "--fusion", "sideways"], root)
            .status
            .code(),
        Some(2)
    );
    // Runtime failure: nothing generated yet.
    let t = moose(&["train"], root);
    assert_eq!(t.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&t.stderr).contains("generate"));
    // Bad config line is reported with its number.
    std::fs::write(root.join("bad.cfg"), "frames = 2\nwidth: 3\n").unwrap();
    let b = moose(&["flops", "--config", "bad.cfg"], root);
    assert_eq!(b.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&b.stderr).contains("line 2"));
}

#[test]
fn flops_reports_default_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = moose(&["flops"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let params: usize = text.lines().next().unwrap()["params: ".len()..]
        .parse()
        .unwrap();
    assert_eq!(
        params,
        moose::model::count_params(&moose::model::MooseConfig::default())
    );
}

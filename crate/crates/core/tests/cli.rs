use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn keytrace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keytrace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = keytrace(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, users: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join("corpus");
    let mut args = vec!["synth", "--users", users, "--seed", "7", "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn train_small(corpus: &Path, out: &Path, epochs: &str) {
    ok(&[
        "train",
        "--corpus",
        p(corpus),
        "--units",
        "6",
        "--epochs",
        epochs,
        "--batches-per-epoch",
        "8",
        "--batch-size",
        "16",
        "--seed",
        "3",
        "--out",
        p(out),
    ]);
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn synth_is_deterministic_and_needs_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "12", &[]);
    let first = fs::read(a.join("events.csv")).unwrap();
    let profiles = fs::read(a.join("profiles.csv")).unwrap();
    synth(dir.path(), "12", &[]);
    assert_eq!(fs::read(a.join("events.csv")).unwrap(), first);
    assert_eq!(fs::read(a.join("profiles.csv")).unwrap(), profiles);
    assert_eq!(data_rows(&a.join("profiles.csv")).len(), 12);

    let out = keytrace(&["synth", "--users", "3", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--seed") && err.contains("Usage:"), "{err}");
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(
        keytrace(&["synth", "--no-such-flag"]).status.code(),
        Some(2)
    );
    assert_eq!(keytrace(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(keytrace(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_values_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.conf");
    fs::write(
        &config,
        "# synthetic run\nusers = 5\nseed = 11\nsentences_per_user = 3\n",
    )
    .unwrap();
    let out = dir.path().join("c");
    ok(&["synth", "--config", p(&config), "--out", p(&out)]);
    assert_eq!(data_rows(&out.join("profiles.csv")).len(), 5);
    ok(&[
        "synth",
        "--config",
        p(&config),
        "--users",
        "6",
        "--out",
        p(&out),
    ]);
    assert_eq!(data_rows(&out.join("profiles.csv")).len(), 6);

    fs::write(&config, "users = 5\nseed = 1\nwarp_factor = 9\n").unwrap();
    let r = keytrace(&["synth", "--config", p(&config), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("warp_factor"));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "20", &[]);
    let model = dir.path().join("model");
    train_small(&corpus, &model, "3");
    let loss = data_rows(&model.join("loss.csv"));
    assert_eq!(loss.len(), 3 * 8);
    assert!(loss[0].starts_with("0,0,"));

    let gallery = dir.path().join("gallery");
    ok(&[
        "enroll",
        "--corpus",
        p(&corpus),
        "--weights",
        p(&model.join("weights.bin")),
        "--out",
        p(&gallery),
    ]);
    let embeddings = gallery.join("embeddings.csv");
    assert_eq!(data_rows(&embeddings).len(), 20 * 15);

    let id = dir.path().join("id");
    let r = ok(&[
        "identify",
        "--embeddings",
        p(&embeddings),
        "--target",
        "user0004",
        "--top",
        "7",
        "--out",
        p(&id),
    ]);
    let ranked = data_rows(&id.join("ranked.csv"));
    assert_eq!(ranked.len(), 7);
    let first = ranked[0].split(',').nth(1).unwrap();
    assert_eq!(String::from_utf8_lossy(&r.stdout).trim(), first);

    // Countries are assigned round-robin over ten codes, so `FI` holds two users.
    let r = ok(&[
        "identify",
        "--embeddings",
        p(&embeddings),
        "--target",
        "user0000",
        "--prescreen",
        "country=FI",
        "--out",
        p(&id),
    ]);
    assert_eq!(data_rows(&id.join("ranked.csv")).len(), 2);
    assert!(r.status.success());

    let r = ok(&[
        "identify",
        "--embeddings",
        p(&embeddings),
        "--target",
        "user0000",
        "--prescreen",
        "country=XX",
        "--out",
        p(&id),
    ]);
    assert!(data_rows(&id.join("ranked.csv")).is_empty());
    assert!(String::from_utf8_lossy(&r.stderr).contains("warning"));

    let r = keytrace(&[
        "identify",
        "--embeddings",
        p(&embeddings),
        "--target",
        "user0000",
        "--prescreen",
        "planet=mars",
        "--out",
        p(&id),
    ]);
    assert_eq!(r.status.code(), Some(1));
    let r = keytrace(&[
        "identify",
        "--embeddings",
        p(&embeddings),
        "--target",
        "nobody",
        "--out",
        p(&id),
    ]);
    assert_eq!(r.status.code(), Some(1));

    let eval = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--embeddings",
        p(&embeddings),
        "--sizes",
        "5,10,20",
        "--ranks",
        "1,10,50",
        "--prescreen-attr",
        "country",
        "--seed",
        "2",
        "--out",
        p(&eval),
    ]);
    for n in [5, 10, 20] {
        let rows = data_rows(&eval.join(format!("cmc_N{n}.csv")));
        assert_eq!(rows.len(), n);
        assert_eq!(rows.last().unwrap(), &format!("{n},1"));
        assert!(eval.join(format!("cmc_N{n}_prescreened.csv")).exists());
    }
    let table = fs::read_to_string(eval.join("rank_table.csv")).unwrap();
    assert!(table.starts_with("# seed=2"));
    assert!(table.contains("Rank-10,false,—,100.0,"));
    assert!(table.contains("Rank-50,false,—,—,—"));

    let r = keytrace(&[
        "evaluate",
        "--embeddings",
        p(&embeddings),
        "--sizes",
        "21",
        "--seed",
        "2",
        "--out",
        p(&eval),
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn training_loss_falls_on_separable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "20", &[]);
    let model = dir.path().join("model");
    train_small(&corpus, &model, "10");
    let mut sums = [0.0f64; 10];
    for row in data_rows(&model.join("loss.csv")) {
        let f: Vec<&str> = row.split(',').collect();
        sums[f[0].parse::<usize>().unwrap()] += f[2].parse::<f64>().unwrap();
    }
    assert!(sums[9] < sums[0], "epoch sums {sums:?}");
}

#[test]
fn enroll_failures() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "6", &["--sentences-per-user", "12"]);
    let model = dir.path().join("model");
    train_small(&corpus, &model, "1");
    let out = dir.path().join("g");
    let r = keytrace(&[
        "enroll",
        "--corpus",
        p(&corpus),
        "--weights",
        p(&model.join("weights.bin")),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(
        err.contains("user0000 (12)") && err.contains("user0005 (12)"),
        "{err}"
    );

    let weights = model.join("weights.bin");
    let bytes = fs::read(&weights).unwrap();
    fs::write(&weights, &bytes[..bytes.len() / 2]).unwrap();
    let r = keytrace(&[
        "enroll",
        "--corpus",
        p(&corpus),
        "--weights",
        p(&weights),
        "--verified",
        "8",
        "--anonymous",
        "4",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("corrupt"));
}

#[test]
fn aalto_format_with_column_map() {
    let dir = tempfile::tempdir().unwrap();
    let mut tsv = String::from("PID\tSECTION\tKEY\tDOWN\tUP\tLETTER\n");
    for user in 0..3 {
        for section in 0..4 {
            for k in 0..6 {
                let t = 1000 * section + 150 * k + 7 * user;
                tsv.push_str(&format!(
                    "{user}\t{user}{section}\t{}\t{t}\t{}\tx\n",
                    65 + k,
                    t + 80 + 10 * user
                ));
            }
        }
    }
    let events = dir.path().join("keys.txt");
    fs::write(&events, tsv).unwrap();
    let config = dir.path().join("aalto.conf");
    fs::write(
        &config,
        "format = aalto\nparticipant_col = PID\nsection_col = SECTION\nkeycode_col = KEY\npress_col = DOWN\nrelease_col = UP\n",
    )
    .unwrap();
    let model = dir.path().join("m");
    ok(&[
        "train",
        "--config",
        p(&config),
        "--events",
        p(&events),
        "--units",
        "4",
        "--epochs",
        "1",
        "--batches-per-epoch",
        "2",
        "--seed",
        "1",
        "--out",
        p(&model),
    ]);
    let gallery = dir.path().join("g");
    ok(&[
        "enroll",
        "--config",
        p(&config),
        "--events",
        p(&events),
        "--weights",
        p(&model.join("weights.bin")),
        "--verified",
        "3",
        "--anonymous",
        "1",
        "--out",
        p(&gallery),
    ]);
    assert_eq!(data_rows(&gallery.join("embeddings.csv")).len(), 12);
}

//! Fixture builders shared by the CLI test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccmine::embed::EmbeddingTable;
use ccmine::metrics::GroundTruth;
use ccmine::segment::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod synth;
#[allow(unused_imports)]
pub use synth::synthetic_corpus;

pub fn fixture_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Runs the binary with logging silenced and no inherited worker or cache
/// settings.
pub fn ccmine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccmine"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("CCMINE_WORKERS")
        .env_remove("CCMINE_LLM_CACHE")
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .expect("spawn ccmine")
}

pub fn ok(args: &[&str]) -> Output {
    let out = ccmine(args);
    assert!(
        out.status.success(),
        "ccmine {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn write_table(path: &Path, dim: usize, entries: &[(&str, &[f32])]) {
    let entries = entries.iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect();
    let table = EmbeddingTable::normalizing(dim, entries).unwrap();
    fs::write(path, table.to_bytes().unwrap()).unwrap();
}

/// The 4-caption corpus plus lexicon, visibility answers and 4-D embeddings.
/// Cosines with boat: dock 0.9, trailer 0.6, the rest 0.
pub fn toy_inputs(dir: &Path) {
    let src = fixture_dir("toy");
    for f in ["corpus.jsonl", "lexicon.txt", "visibility.jsonl"] {
        fs::copy(src.join(f), dir.join(f)).unwrap();
    }
    write_table(
        &dir.join("embeddings.bin"),
        4,
        &[
            ("boat", &[1.0, 0.0, 0.0, 0.0]),
            ("water", &[0.0, 1.0, 0.0, 0.0]),
            ("dock", &[0.9, 0.4359, 0.0, 0.0]),
            ("sunset", &[0.0, 0.0, 1.0, 0.0]),
            ("trailer", &[0.6, 0.0, 0.0, 0.8]),
            ("cat", &[0.0, 0.0, 0.0, 1.0]),
            ("photo", &[0.0, 0.6, 0.8, 0.0]),
        ],
    );
}

pub fn toy_mine(dir: &Path, extra: &[&str]) {
    let (corpus, lexicon) = (dir.join("corpus.jsonl"), dir.join("lexicon.txt"));
    let mut args = vec!["mine", "--corpus", s(&corpus), "--lexicon", s(&lexicon), "--out-dir", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

pub fn toy_build(dir: &Path, out: &Path, extra: &[&str]) {
    let (cooc, counts) = (dir.join("cooc.txt"), dir.join("counts.txt"));
    let (emb, vis) = (dir.join("embeddings.bin"), dir.join("visibility.jsonl"));
    let mut args = vec![
        "build-cc",
        "--cooc",
        s(&cooc),
        "--counts",
        s(&counts),
        "--embeddings",
        s(&emb),
        "--visibility",
        s(&vis),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// The `cc` map of a dictionary file as plain vectors.
pub fn dict_entries(path: &Path) -> BTreeMap<String, Vec<String>> {
    serde_json::from_value(read_json(path)["cc"].clone()).unwrap()
}

fn write_image(dir: &Path, id: &str, features: &FeatureMap, gt: &GroundTruth) {
    fs::create_dir_all(dir.join("features")).unwrap();
    fs::create_dir_all(dir.join("gt")).unwrap();
    fs::write(dir.join("features").join(format!("{id}.feat")), features.to_bytes()).unwrap();
    let seg = dir.join("gt").join(format!("{id}.seg"));
    fs::write(&seg, gt.to_bytes()).unwrap();
    fs::write(dir.join("gt").join(format!("{id}.seg.json")), gt.sidecar_json()).unwrap();
}

fn labels(names: &[&str]) -> BTreeMap<u16, String> {
    names.iter().enumerate().map(|(i, n)| (i as u16, n.to_string())).collect()
}

pub const BOAT_PIXEL: [f32; 4] = [0.8, 0.0, 0.0, 0.6];
pub const WATER_PIXEL: [f32; 4] = [0.0, 0.8, 0.0, 0.6];
/// Closer to boat than to background, closest to dock.
pub const DISTRACTOR_PIXEL: [f32; 4] = [0.6, 0.0, 0.78, 0.2];
pub const PLAIN_PIXEL: [f32; 4] = [0.0, 0.0, 0.0, 1.0];

/// Two 4x4 images of boat (gt 1), water (gt 2) and background (gt 0). Part
/// of the background looks like a dock, which co-occurs with both classes in
/// the corpus. Embeddings: boat, water, dock, background on the four axes.
///
/// Region sizes (boat, water, dock-like, plain): image a 4/4/4/4, image b
/// 6/2/6/2, laid out row-major in that order.
pub fn directional_inputs(dir: &Path) {
    fs::write(
        dir.join("corpus.jsonl"),
        concat!(
            "{\"id\":\"1\",\"text\":\"a boat tied to the dock\"}\n",
            "{\"id\":\"2\",\"text\":\"calm water under the dock\"}\n",
            "{\"id\":\"3\",\"text\":\"a boat\"}\n",
        ),
    )
    .unwrap();
    fs::write(dir.join("lexicon.txt"), "boat\nwater\ndock\n").unwrap();
    fs::write(
        dir.join("visibility.jsonl"),
        concat!(
            "{\"concept\":\"boat\",\"visible\":true,\"source\":\"manual\"}\n",
            "{\"concept\":\"dock\",\"visible\":true,\"source\":\"manual\"}\n",
            "{\"concept\":\"water\",\"visible\":true,\"source\":\"manual\"}\n",
        ),
    )
    .unwrap();
    write_table(
        &dir.join("embeddings.bin"),
        4,
        &[
            ("boat", &[1.0, 0.0, 0.0, 0.0]),
            ("water", &[0.0, 1.0, 0.0, 0.0]),
            ("dock", &[0.0, 0.0, 1.0, 0.0]),
            ("background", &[0.0, 0.0, 0.0, 1.0]),
        ],
    );
    for (id, sizes) in [("a", [4, 4, 4, 4]), ("b", [6, 2, 6, 2])] {
        let (features, gt) = directional_image(sizes);
        write_image(dir, id, &features, &gt);
    }
}

pub fn directional_image(sizes: [usize; 4]) -> (FeatureMap, GroundTruth) {
    let kinds = [(BOAT_PIXEL, 1u16), (WATER_PIXEL, 2), (DISTRACTOR_PIXEL, 0), (PLAIN_PIXEL, 0)];
    let mut data = Vec::new();
    let mut pixels = Vec::new();
    for (&(f, id), &n) in kinds.iter().zip(&sizes) {
        for _ in 0..n {
            data.extend_from_slice(&f);
            pixels.push(id);
        }
    }
    assert_eq!(pixels.len(), 16);
    let features = FeatureMap::new(4, 4, 4, data).unwrap();
    let gt = GroundTruth::new(4, 4, pixels, labels(&["background", "boat", "water"]), None, Some(0)).unwrap();
    (features, gt)
}

/// Pixels of class c have cosine in [0.5, 0.9] with c and 0 with the other
/// class; background pixels have cosine in [-0.4, 0.3] with both.
pub fn sigmoid_inputs(dir: &Path, seed: u64) {
    write_table(
        &dir.join("embeddings.bin"),
        4,
        &[("boat", &[1.0, 0.0, 0.0, 0.0]), ("water", &[0.0, 1.0, 0.0, 0.0])],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in ["a", "b", "c"] {
        let (h, w) = (8, 8);
        let mut data = Vec::new();
        let mut pixels = Vec::new();
        for _ in 0..h * w {
            let class: u16 = rng.gen_range(0..3);
            let (a, b) = match class {
                1 => (rng.gen_range(0.5..0.9), 0.0),
                2 => (0.0, rng.gen_range(0.5..0.9)),
                _ => (rng.gen_range(-0.4..0.3), rng.gen_range(-0.4..0.3)),
            };
            let rest = (1.0f64 - a * a - b * b).sqrt();
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            data.extend([a, b, rest * angle.cos(), rest * angle.sin()].map(|v| v as f32));
            pixels.push(class);
        }
        let features = FeatureMap::new(h, w, 4, data).unwrap();
        let gt = GroundTruth::new(h, w, pixels, labels(&["background", "boat", "water"]), None, Some(0)).unwrap();
        write_image(dir, id, &features, &gt);
    }
}


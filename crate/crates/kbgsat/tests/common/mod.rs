//! Fixtures shared by the CLI integration tests and the acceptance suite.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use kbgsat_core::seeded_rng;
use rand::seq::SliceRandom;

/// Runs the command line in-process and returns `(exit, stdout, stderr)`.
pub fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = kbgsat::cli::main_with_args(std::iter::once("kbgsat").chain(args.iter().copied()), &mut out, &mut err);
    (
        code,
        String::from_utf8(out).expect("utf-8 stdout"),
        String::from_utf8(err).expect("utf-8 stderr"),
    )
}

pub fn write_dataset(dir: &Path, train: &str, valid: &str, test: &str) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("train.txt"), train).unwrap();
    fs::write(dir.join("valid.txt"), valid).unwrap();
    fs::write(dir.join("test.txt"), test).unwrap();
}

/// Separable toy KG with named entities. `r0` links every source in
/// {A, B, E, F} to every target in {C, D, G, H}; `r1` links targets back to
/// sources. `(B, r0, C)` is the test triple, so a model that learns the two
/// types ranks `C` first for `(B, r0, ?)` once B's known tails are filtered.
pub fn toy_dataset(dir: &Path) {
    let sources = ["A", "B", "E", "F"];
    let targets = ["C", "D", "G", "H"];
    let held_out = [("B", "r0", "C"), ("A", "r0", "D"), ("H", "r1", "F")];
    let mut train = String::new();
    for s in sources {
        for t in targets {
            for (h, r, tl) in [(s, "r0", t), (t, "r1", s)] {
                if !held_out.contains(&(h, r, tl)) {
                    writeln!(train, "{h}\t{r}\t{tl}").unwrap();
                }
            }
        }
    }
    write_dataset(dir, &train, "A\tr0\tD\nH\tr1\tF\n", "B\tr0\tC\n");
}

/// Entities in the synthetic KG.
pub const SYN_ENTITIES: usize = 50;
pub const SYN_CLASSES: usize = 5;
pub const SYN_RELATIONS: usize = 3;

/// Synthetic separable KG: entity `e` has class `e mod 5`, and `(h, r_k, t)`
/// holds exactly when `class(t) = class(h) + k + 1 (mod 5)`. Relation 2 is
/// the composition of relations 0 and 1. Ten percent of the facts, drawn
/// with `seed`, are held out and split evenly into valid and test.
/// Returns the three split files as text.
pub fn synthetic_kg(seed: u64) -> [String; 3] {
    let mut facts = Vec::new();
    for h in 0..SYN_ENTITIES {
        for k in 0..SYN_RELATIONS {
            for t in 0..SYN_ENTITIES {
                if t % SYN_CLASSES == (h % SYN_CLASSES + k + 1) % SYN_CLASSES {
                    facts.push((h, k, t));
                }
            }
        }
    }
    facts.shuffle(&mut seeded_rng(seed));
    let held = facts.len() / 10;
    let fmt = |fs: &[(usize, usize, usize)]| {
        let mut s = String::new();
        for (h, r, t) in fs {
            writeln!(s, "e{h}\tr{r}\te{t}").unwrap();
        }
        s
    };
    let (valid, rest) = facts.split_at(held / 2);
    let (test, train) = rest.split_at(held - held / 2);
    [fmt(train), fmt(valid), fmt(test)]
}

pub fn synthetic_dataset(dir: &Path, seed: u64) {
    let [train, valid, test] = synthetic_kg(seed);
    write_dataset(dir, &train, &valid, &test);
}

/// Small, fast model settings for CLI runs on the fixtures.
pub fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("small.conf");
    let text = format!(
        "# small test configuration\n\
         dim = 8\nlayers = 2\ndecoder = distmult\ndropout = 0.0\n\
         lr = 0.01\nbatch_size = 8\nepochs_max = 40\npatience = 40\n\
         selftrain.epochs = 5\nworkers = 1\nseed = 3\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path
}

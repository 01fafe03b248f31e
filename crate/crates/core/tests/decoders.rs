//! Replays the fuzz corpus and random mutations of it through the same
//! round-trip properties the fuzz targets assert.

use std::path::PathBuf;

use comet::checkpoint::Checkpoint;
use comet::scenario::ScenarioConfig;
use comet::stream::{parse_dataset_csv, write_dataset_csv};
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus for {target}");
    files
        .into_iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect()
}

fn scenario_property(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(s) = ScenarioConfig::from_toml_str(text) {
        let back =
            ScenarioConfig::from_toml_str(&s.to_toml_string()).expect("serialized scenario parses");
        assert_eq!(back, s);
    }
}

fn checkpoint_property(data: &[u8]) {
    if let Ok(c) = Checkpoint::decode(data) {
        let bytes = c.encode();
        let again = Checkpoint::decode(&bytes).expect("encoded checkpoint decodes");
        assert_eq!(again.encode(), bytes);
    }
}

fn csv_property(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(examples) = parse_dataset_csv(text) {
        if examples.is_empty() {
            return;
        }
        let mut out = Vec::new();
        write_dataset_csv(&examples, &mut out).unwrap();
        assert_eq!(
            parse_dataset_csv(std::str::from_utf8(&out).unwrap()).unwrap(),
            examples
        );
    }
}

#[test]
fn corpus_seeds_hold_round_trip_properties() {
    let mut accepted = [0; 3];
    for data in corpus("scenario_toml") {
        scenario_property(&data);
        accepted[0] +=
            ScenarioConfig::from_toml_str(std::str::from_utf8(&data).unwrap()).is_ok() as usize;
    }
    for data in corpus("checkpoint_decode") {
        checkpoint_property(&data);
        accepted[1] += Checkpoint::decode(&data).is_ok() as usize;
    }
    for data in corpus("dataset_csv") {
        csv_property(&data);
        accepted[2] += parse_dataset_csv(std::str::from_utf8(&data).unwrap()).is_ok() as usize;
    }
    // Every corpus mixes valid seeds with rejected ones.
    assert!(accepted.iter().all(|&n| n > 0), "{accepted:?}");
}

/// A corpus seed with a few bytes overwritten, inserted, or cut off.
fn mutated(target: &'static str) -> impl Strategy<Value = Vec<u8>> {
    let seeds = corpus(target);
    (
        0..seeds.len(),
        prop::collection::vec((any::<prop::sample::Index>(), any::<u8>(), 0u8..3), 0..8),
        any::<prop::sample::Index>(),
        any::<bool>(),
    )
        .prop_map(move |(i, edits, cut, truncate)| {
            let mut d = seeds[i].clone();
            for (at, byte, kind) in edits {
                if d.is_empty() {
                    d.push(byte);
                    continue;
                }
                let at = at.index(d.len());
                match kind {
                    0 => d[at] = byte,
                    1 => d.insert(at, byte),
                    _ => {
                        d.remove(at);
                    }
                }
            }
            if truncate && !d.is_empty() {
                d.truncate(cut.index(d.len()));
            }
            d
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn mutated_scenarios(data in mutated("scenario_toml")) {
        scenario_property(&data);
    }

    #[test]
    fn mutated_checkpoints(data in mutated("checkpoint_decode")) {
        checkpoint_property(&data);
    }

    #[test]
    fn mutated_datasets(data in mutated("dataset_csv")) {
        csv_property(&data);
    }

    #[test]
    fn arbitrary_bytes(data in prop::collection::vec(any::<u8>(), 0..256)) {
        scenario_property(&data);
        checkpoint_property(&data);
        csv_property(&data);
    }
}

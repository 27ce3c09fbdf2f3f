//! The shipped example configs stay parseable and in sync with the presets.

use pointseq::cells::CellKind;
use pointseq::config::ModelConfig;
use std::path::PathBuf;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn every_shipped_config_parses_and_round_trips() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "cfg") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg = ModelConfig::parse(&text)
            .unwrap_or_else(|e| panic!("{} does not parse: {}", path.display(), e));
        let back = ModelConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg, "{} does not round-trip", path.display());
        seen += 1;
    }
    assert!(seen >= 5, "expected the shipped configs, found {}", seen);
}

#[test]
fn shipped_stacks_match_their_presets() {
    let read = |name: &str| {
        ModelConfig::parse(&std::fs::read_to_string(configs_dir().join(name)).unwrap()).unwrap()
    };
    assert_eq!(read("mnist-basic-lstm.cfg"), ModelConfig::mnist_basic(CellKind::Lstm, 128).unwrap());
    assert_eq!(read("mnist-basic-rnn.cfg"), ModelConfig::mnist_basic(CellKind::Rnn, 128).unwrap());
    assert_eq!(
        read("mnist-advanced-lstm.cfg"),
        ModelConfig::mnist_advanced(CellKind::Lstm, 128).unwrap()
    );
    assert_eq!(
        read("driving-advanced-lstm.cfg"),
        ModelConfig::driving_advanced(CellKind::Lstm, 1024).unwrap()
    );
    assert_eq!(read("micro-lstm.cfg"), ModelConfig::micro(CellKind::Lstm, 128, 16, 4).unwrap());
}

use std::path::Path;

use streamopt_bench::{Buffer, Kind, Scenario};

fn load(name: &str) -> Scenario {
    Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)).unwrap()
}

#[test]
fn bundled_scenarios_parse() {
    let s = load("synthetic.toml");
    assert_eq!((s.kind, s.buffer, s.frames()), (Kind::SyntheticLs, Buffer::Frames(3), 20));
    let s = load("level-crossing.toml");
    assert_eq!((s.kind, s.buffer, s.frames()), (Kind::LotLs, Buffer::Full, 16));
    assert_eq!(s.gamma(), 1e-3);
    let s = load("intensity.toml");
    assert_eq!((s.kind, s.buffer, s.frames()), (Kind::NhppNoa, Buffer::Frames(6), 40));
    assert_eq!(s.buffer_sweep, [2, 4, 6, 8]);
}

#[test]
fn command_line_seed_selects_configs() {
    let s = load("intensity.toml");
    let cfg = s.nhpp_config(9);
    assert_eq!((cfg.rate_seed, cfg.event_seed), (9, 9));
    assert_eq!(s.lot_config(4).signal_seed, 4);
    assert!(s.run_dir(9).ends_with("nhpp-noa-seed9"));
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut s = Scenario::default();
    s.seeds.clear();
    assert!(s.validate().is_err());
    let s = Scenario {
        eps0: 0.0,
        ..Scenario::default()
    };
    assert!(s.validate().is_err());
    let s = Scenario {
        buffer_sweep: vec![0, 2],
        ..Scenario::default()
    };
    assert!(s.validate().is_err());
}

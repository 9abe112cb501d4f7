use beamtrack::channel::SceneConfig;
use beamtrack::dataset::*;
use beamtrack::harness::RunConfig;
use beamtrack::harness::Preset;
use beamtrack::Error;

fn tiny() -> SceneConfig {
    SceneConfig {
        n_slots: 3,
        ..SceneConfig::desk()
    }
}

fn tiny_set(n: usize) -> Dataset {
    generate_split(&tiny(), &default_grid(), Split::Train, n, 21, false).unwrap()
}

#[test]
fn write_read_round_trip_is_bit_exact() {
    let ds = tiny_set(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(std::fs::read(&path).unwrap(), dataset_to_bytes(&back).unwrap());
}

#[test]
fn file_size_follows_the_layout() {
    let ds = tiny_set(3);
    let (n, q, g, na) = (3, 16, 9, 16);
    let header = 124 + 8 * g;
    let record = 8 + 16 * n + 8 * n * q + 8 * n * g + 8 * n * g * na;
    assert_eq!(record, record_size(&tiny(), g));
    assert_eq!(dataset_to_bytes(&ds).unwrap().len(), header + 3 * record);
    assert_eq!(ds.file_size(), header + 3 * record);
}

#[test]
fn any_corrupted_header_byte_is_a_format_error() {
    let ds = tiny_set(2);
    let bytes = dataset_to_bytes(&ds).unwrap();
    for i in 0..ds.header.size() {
        let mut b = bytes.clone();
        b[i] ^= 0xFF;
        match dataset_from_bytes(&b) {
            Err(Error::Format(_)) => {}
            other => panic!("byte {i}: {other:?}"),
        }
    }
}

#[test]
fn truncation_reports_the_offset() {
    let ds = tiny_set(2);
    let bytes = dataset_to_bytes(&ds).unwrap();
    let cut = bytes.len() - 6;
    match dataset_from_bytes(&bytes[..cut]) {
        Err(Error::Truncated { offset, needed }) => {
            // The last complete f32 ends 8 bytes before the end; the next
            // read finds 2 of its 4 bytes.
            assert_eq!((offset, needed), (bytes.len() - 8, 2));
        }
        other => panic!("{other:?}"),
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(dataset_from_bytes(&long), Err(Error::Format(_))));
}

#[test]
fn corrupted_label_is_caught_on_load() {
    let ds = tiny_set(2);
    let mut bytes = dataset_to_bytes(&ds).unwrap();
    let (n, q) = (3, 16);
    let at = ds.header.size() + 8 + 16 * n + 8 * n * q;
    let label = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    assert_eq!(label as usize, ds.episodes[0].labels[0][0]);
    bytes[at..at + 4].copy_from_slice(&((label + 1) % 16).to_le_bytes());
    assert!(matches!(dataset_from_bytes(&bytes), Err(Error::Data(_))));
    bytes[at..at + 4].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(dataset_from_bytes(&bytes), Err(Error::Data(_))));
}

#[test]
fn labels_are_optimal_everywhere() {
    verify_labels(&tiny_set(5), 1).unwrap();
}

#[test]
fn stationary_ue_keeps_its_label_within_a_slot() {
    let scene = SceneConfig {
        ue_speed: 0.0,
        ..tiny()
    };
    let ds = generate_split(&scene, &default_grid(), Split::Train, 10, 2, false).unwrap();
    for ep in &ds.episodes {
        for slot in &ep.labels {
            assert!(slot.iter().all(|&l| l == slot[0]), "{slot:?}");
        }
    }
}

#[test]
fn generation_is_deterministic_and_thread_independent() {
    let grid = default_grid();
    let a = generate_episode(&tiny(), &grid, 77).unwrap();
    let b = generate_episode(&tiny(), &grid, 77).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_episode(&tiny(), &grid, 78).unwrap());
    let serial = generate_split(&tiny(), &grid, Split::Validation, 24, 5, false).unwrap();
    let parallel = generate_split(&tiny(), &grid, Split::Validation, 24, 5, true).unwrap();
    assert_eq!(serial, parallel);
}

#[test]
fn train_and_validation_seeds_are_disjoint() {
    let (train, val) = generate_dataset(&tiny(), &default_grid(), 40, 20, 3).unwrap();
    let seeds: std::collections::HashSet<u64> = train.episodes.iter().map(|e| e.seed).collect();
    assert_eq!(seeds.len(), 40);
    assert!(val.episodes.iter().all(|e| !seeds.contains(&e.seed)));
}

#[test]
fn default_counts_and_grid() {
    let cfg = RunConfig::preset(Preset::Full);
    assert_eq!((cfg.n_train, cfg.n_val), (10240, 2560));
    let desk = RunConfig::preset(Preset::Desk);
    assert_eq!((desk.n_train, desk.n_val), (2048, 512));
    let g = default_grid();
    assert_eq!(g.len(), 9);
    assert!((g[0] - 0.1).abs() < 1e-15 && (g[8] - 0.9).abs() < 1e-15);
}

#[test]
fn zero_episodes_or_bad_grid_are_config_errors() {
    assert!(matches!(
        generate_split(&tiny(), &default_grid(), Split::Train, 0, 1, false),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        generate_split(&tiny(), &[0.5, 1.5], Split::Train, 1, 1, false),
        Err(Error::Config(_))
    ));
}

#[test]
fn labels_drift_slowly_at_full_scale() {
    // Circular distance between labels at consecutive instants of a slot.
    let scene = SceneConfig::full();
    let ds = generate_split(&scene, &default_grid(), Split::Train, 100, 9, true).unwrap();
    let q = scene.n_beams as i64;
    let mut steps: Vec<i64> = Vec::new();
    for ep in &ds.episodes {
        for slot in &ep.labels {
            for w in slot.windows(2) {
                let d = (w[1] as i64 - w[0] as i64).rem_euclid(q);
                steps.push(d.min(q - d));
            }
        }
    }
    steps.sort_unstable();
    assert!(steps[steps.len() / 2] <= 1, "median drift {}", steps[steps.len() / 2]);
}

#[test]
fn stored_ue_states_move_at_most_one_slot_of_travel() {
    let ds = tiny_set(5);
    let s = tiny();
    for ep in &ds.episodes {
        for w in ep.ue_states.windows(2) {
            let d = ((w[1][0] - w[0][0]) as f64).hypot((w[1][1] - w[0][1]) as f64);
            assert!(d <= s.ue_speed * s.slot_length + 1e-4, "{d}");
            assert_eq!(w[1][3], s.ue_speed as f32);
        }
    }
}

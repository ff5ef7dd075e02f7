mod common;

use attnreg_core::metrics::*;
use attnreg_core::toy::{run_with_hooks, HookSet, RunOptions};
use attnreg_core::*;
use common::composite_fixtures;

fn debug_run(heads: usize) -> (ToyModel, RunRecord) {
    let model = ToyModel::new(ModelConfig {
        heads,
        ..Default::default()
    })
    .unwrap();
    let prompt = Prompt::parse("a bear with a book", 16).unwrap();
    let sampler = SamplerConfig {
        steps: 10,
        ..Default::default()
    };
    let options = RunOptions {
        keep_maps: true,
        ..Default::default()
    };
    let record = run_with_hooks(&model, &prompt, &sampler, HookSet::new(), 3, options).unwrap();
    (model, record)
}

#[test]
fn head_max_matches_retained_maps() {
    let (_, r) = debug_run(2);
    let maps = r.debug_maps.as_ref().unwrap();
    for step in [0, 4, 9] {
        for (l, desc) in r.layers.iter().enumerate() {
            let stats = head_max_stats(&r, desc.id, step).unwrap();
            let map = &maps[step][l];
            for (t, heads) in stats.per_token.iter().enumerate() {
                for (h, &v) in heads.iter().enumerate() {
                    let direct = map.column(h, t).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(v, direct);
                }
            }
        }
    }
}

#[test]
fn single_head_gives_singletons() {
    let (_, r) = debug_run(1);
    let u0 = r.layer_by_name("u0").unwrap();
    let l = r.layer_index(u0).unwrap();
    let stats = head_max_stats(&r, u0, 9).unwrap();
    for (t, heads) in stats.per_token.iter().enumerate() {
        assert_eq!(heads, &vec![r.maxima[[9, l, 0, t]]]);
    }
}

/// First up-sampling layer, final step, tokens BOS..EOS of the seed-3 run.
/// Both `a` positions share one key, hence identical rows.
const GOLDEN_U0_FINAL: [[f64; 2]; 7] = [
    [1.77184616173329063e-1, 1.89609509670127713e-1],
    [4.97324562180726071e-1, 4.63477225814314275e-1],
    [8.75083408034253329e-1, 5.41147912497831673e-1],
    [3.77207492745184267e-2, 4.29744146143980210e-1],
    [4.97324562180726071e-1, 4.63477225814314275e-1],
    [4.60857823765837352e-2, 4.17538579480810967e-1],
    [4.86707917404168439e-2, 5.73144672712797149e-2],
];

#[test]
fn golden_slice() {
    let (_, r) = debug_run(2);
    let u0 = r.layer_by_name("u0").unwrap();
    let stats = head_max_stats(&r, u0, 9).unwrap();
    for (t, row) in GOLDEN_U0_FINAL.iter().enumerate() {
        for h in 0..2 {
            assert!((stats.per_token[t][h] - row[h]).abs() < 1e-9, "token {t} head {h}");
        }
    }
}

#[test]
fn missing_keys_rejected() {
    let (_, r) = debug_run(2);
    assert!(matches!(head_max_stats(&r, LayerId(40), 0), Err(Error::MissingRecord(_))));
    assert!(matches!(head_max_stats(&r, LayerId(0), 10), Err(Error::MissingRecord(_))));
}

#[test]
fn violin_csv_rows() {
    let (_, r) = debug_run(2);
    let stats = head_max_stats(&r, LayerId(4), 9).unwrap();
    let mut buf = Vec::new();
    stats.write_csv(&mut buf, true).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], HEAD_MAX_CSV_HEADER);
    assert_eq!(lines.len(), 1 + 16 * 2);
    let fields: Vec<&str> = lines[3].split(',').collect();
    assert_eq!(&fields[..4], &["4", "9", "1", "0"]);
    assert_eq!(fields[4].parse::<f64>().unwrap(), stats.per_token[1][0]);
}

#[test]
fn composite_fixtures_match_hand_values() {
    let img = GrayImage {
        width: 16,
        height: 16,
        pixels: vec![128; 256],
    };
    let fixtures = composite_fixtures();
    assert_eq!(fixtures.len(), 5);
    for (path, fx) in fixtures {
        let objects: Vec<&str> = fx.objects.iter().map(String::as_str).collect();
        let score = composite_score(&img, &objects, &fx.backend).unwrap();
        assert_eq!(score, fx.expected, "{}", path.display());
    }
}

#[test]
fn out_of_range_similarity_is_a_backend_error() {
    let backend = FixtureBackend::from_json(
        r#"{"detections": {"cat": [{"bbox": {"x0": 0, "y0": 0, "x1": 1, "y1": 1}, "similarity": 1.5}]}}"#,
    )
    .unwrap();
    let img = GrayImage {
        width: 1,
        height: 1,
        pixels: vec![0],
    };
    assert!(matches!(composite_score(&img, &["cat"], &backend), Err(Error::Backend(_))));
    assert!(FixtureBackend::from_json(r#"{"detection": {}}"#).is_err());
}

#[test]
fn latent_distance_is_frobenius() {
    let a = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
    let b = ndarray::array![[1.0, 0.0], [0.0, 4.0]];
    assert_eq!(latent_distance(&a, &b).unwrap(), 13f64.sqrt());
    assert!(latent_distance(&a, &ndarray::Array2::zeros((1, 2))).is_err());
}

use neurodecode_core::{Rng, Tensor};
use neurodecode_data::hrf::HrfLibrary;
use neurodecode_data::synth::{make_schedules, noiseless_bold, test_count};
use neurodecode_data::*;

fn quiet(n: usize, v: usize, sessions: usize) -> SynthConfig {
    SynthConfig {
        n_stimuli: n,
        image_size: 16,
        voxels: v,
        sessions,
        snr: None,
        noise_sd: 0.0,
        drift_sd: 0.0,
        structured_noise: 0.0,
        null_voxel_fraction: 0.0,
        ..SynthConfig::default()
    }
}

#[test]
fn single_event_without_noise_is_a_scaled_hrf() {
    let cfg = SynthConfig { response_offset: 1.5, hrf_index: Some(7), ..quiet(1, 1, 1) };
    let ds = generate_dataset(&cfg, &mut Rng::new(1)).unwrap();
    let lib = HrfLibrary::standard(cfg.tr).unwrap();
    let onset = ds.schedules[0].onset_rows()[0];
    let y = ds.bold[0].data();
    for (t, &v) in y.iter().enumerate() {
        let expect = if t >= onset && t - onset < lib.kernels[7].len() { 1.5 * lib.kernels[7].data()[t - onset] } else { 0.0 };
        assert_eq!(v, expect, "t = {t}");
    }
}

#[test]
fn default_config_shapes() {
    let cfg = SynthConfig::default();
    let ds = generate_dataset(&cfg, &mut Rng::new(2)).unwrap();
    assert_eq!(ds.stimuli.len(), 200);
    assert_eq!(ds.schedules.len(), 4);
    assert_eq!(ds.amplitudes.shape(), &[500, 200]);
    for (b, s) in ds.bold.iter().zip(&ds.schedules) {
        assert_eq!(b.shape(), &[500, s.timepoints()]);
        assert!(b.all_finite());
    }
    assert_eq!(ds.stimuli[0].image.shape(), &[3, 64, 64]);
}

#[test]
fn schedules_are_sorted_and_spaced() {
    let cfg = quiet(30, 5, 3);
    for s in make_schedules(&cfg, &mut Rng::new(3)).unwrap() {
        assert!(s.onsets.windows(2).all(|w| w[1].1 - w[0].1 >= cfg.tr));
        let mut ids: Vec<usize> = s.onsets.iter().map(|o| o.0).collect();
        ids.sort();
        assert_eq!(ids, (0..30).collect::<Vec<_>>());
    }
    let bad = SynthConfig { isi: 0.5, ..cfg };
    assert!(make_schedules(&bad, &mut Rng::new(3)).is_err());
}

#[test]
fn doubling_amplitudes_doubles_noiseless_bold() {
    let ds = generate_dataset(&quiet(12, 6, 1), &mut Rng::new(4)).unwrap();
    let lib = HrfLibrary::standard(1.0).unwrap();
    let a = &ds.trial_amplitudes[0];
    let y1 = noiseless_bold(&ds.schedules[0], a, &lib, &ds.forward.hrf_index).unwrap();
    let y2 = noiseless_bold(&ds.schedules[0], &a.scale(2.0), &lib, &ds.forward.hrf_index).unwrap();
    assert_eq!(y2, y1.scale(2.0));
    assert_eq!(y1, ds.evoked[0]);
}

fn records(rows: &[Vec<f64>]) -> Vec<BetaRecord> {
    rows.iter().enumerate().map(|(i, r)| BetaRecord { beta: Tensor::from_vec(r.clone()), stimulus_id: i, subject_id: 1, normalized: false }).collect()
}

#[test]
fn two_point_zscore() {
    let (out, zero) = zscore_betas(&records(&[vec![0.0], vec![2.0]])).unwrap();
    assert_eq!(zero, 0);
    assert_eq!(out[0].beta.data(), &[-1.0]);
    assert_eq!(out[1].beta.data(), &[1.0]);
    assert!(out.iter().all(|r| r.normalized));
    assert!(zscore_betas(&records(&[vec![1.0]])).is_err());
}

#[test]
fn zscore_statistics_and_idempotence() {
    let mut rng = Rng::new(5);
    let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..7).map(|k| 3.0 * rng.normal() + k as f64).collect()).collect();
    let (z, _) = zscore_betas(&records(&rows)).unwrap();
    for k in 0..7 {
        let col: Vec<f64> = z.iter().map(|r| r.beta.data()[k]).collect();
        let m = col.iter().sum::<f64>() / 100.0;
        let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(m.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10);
    }
    let (zz, _) = zscore_betas(&z).unwrap();
    for (a, b) in z.iter().zip(&zz) {
        for (x, y) in a.beta.data().iter().zip(b.beta.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_variance_voxels_are_zeroed_and_counted() {
    let (z, zero) = zscore_betas(&records(&[vec![1.0, 5.0], vec![3.0, 5.0]])).unwrap();
    assert_eq!(zero, 1);
    assert_eq!(z[0].beta.data()[1], 0.0);
}

#[test]
fn split_sizes_and_determinism() {
    let items: Vec<usize> = (0..10).collect();
    let (tr, te) = split_dataset(&items, 0.9, &mut Rng::new(6)).unwrap();
    assert_eq!((tr.len(), te.len()), (9, 1));
    assert_eq!(test_count(9841, 0.9), 984);
    assert_eq!(9841 - test_count(9841, 0.9), 8857);
    let big: Vec<usize> = (0..200).collect();
    let a = split_dataset(&big, 0.9, &mut Rng::new(7)).unwrap();
    let b = split_dataset(&big, 0.9, &mut Rng::new(7)).unwrap();
    assert_eq!(a, b);
    assert!(a.1.iter().all(|x| !a.0.contains(x)));
    assert_eq!(a.0.len() + a.1.len(), 200);
    assert!(split_dataset(&items, 1.0, &mut Rng::new(6)).is_err());
    assert!(split_dataset(&items[..2], 0.9, &mut Rng::new(6)).is_err());
}

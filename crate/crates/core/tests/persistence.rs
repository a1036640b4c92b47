use kma::averaging::{WeightVector, WeightedModel};
use kma::dynamics::{generate_dataset, DataPlan, Partition, PartitionPlan, SystemSpec};
use kma::edmd::{GaussianNoiseModel, LinearEmbeddingModel, Lift};
use kma::features::FeatureMap;
use kma::training::{EpochRecord, TrainReport};
use kma::workbench::persist::{
    load_json, read_dataset, read_train_report, save_json, write_dataset, write_train_report, Metrics, ModelArtifact,
    WeightsReport,
};
use kma::workbench::ExperimentConfig;
use kma::ExecMode;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn awkward_floats() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(f64::MIN_POSITIVE / 3.0),
        Just(-0.0),
        Just(f64::MAX),
        Just(std::f64::consts::PI),
        Just(0.1 + 0.2),
    ]
}

fn bits(m: &DMatrix<f64>) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn model_files_round_trip_bitwise(vals in prop::collection::vec(awkward_floats(), 9 + 3 + 6 + 5), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let model = LinearEmbeddingModel {
            a: DMatrix::from_row_slice(3, 3, &vals[..9]),
            b: DMatrix::from_row_slice(3, 1, &vals[9..12]),
            c: DMatrix::from_row_slice(2, 3, &vals[12..18]),
            noise: Some(GaussianNoiseModel {
                sigma_x: DVector::from_row_slice(&vals[18..20]),
                sigma_z: DVector::from_row_slice(&vals[20..23]),
            }),
        };
        let lift = Lift::MlpFeatures(FeatureMap::init(2, 1, &[4], Default::default(), seed).unwrap());
        let art = ModelArtifact::Linear { system: SystemSpec::duffing(0.01), lift: lift.clone(), model: model.clone() };
        let path = dir.path().join("m.json");
        save_json(&path, &art).unwrap();
        let back: ModelArtifact = load_json(&path).unwrap();
        let ModelArtifact::Linear { model: m2, lift: l2, .. } = &back else { panic!("kind changed") };
        prop_assert_eq!(bits(&m2.a), bits(&model.a));
        prop_assert_eq!(bits(&m2.b), bits(&model.b));
        prop_assert_eq!(bits(&m2.c), bits(&model.c));
        prop_assert_eq!(l2, &lift);

        let wm = WeightedModel {
            a_bar: model.a.clone(),
            b_bar: model.b.clone(),
            ca_bar: model.c.clone(),
            cb_bar: DMatrix::from_row_slice(2, 1, &vals[20..22]),
            c_bar: model.c.clone(),
            w: WeightVector::new(vec![0.25, 0.75]).unwrap(),
        };
        let wart = ModelArtifact::Weighted { system: SystemSpec::duffing(0.01), lift, model: wm.clone() };
        save_json(&path, &wart).unwrap();
        let ModelArtifact::Weighted { model: w2, .. } = load_json::<ModelArtifact>(&path).unwrap() else { panic!("kind changed") };
        prop_assert_eq!(bits(&w2.a_bar), bits(&wm.a_bar));
        prop_assert_eq!(bits(&w2.ca_bar), bits(&wm.ca_bar));
        prop_assert_eq!(bits(&w2.cb_bar), bits(&wm.cb_bar));
        prop_assert_eq!(w2.w, wm.w);
    }

    #[test]
    fn non_finite_matrices_are_refused(bad in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), Just(f64::NEG_INFINITY)]) {
        let dir = tempfile::tempdir().unwrap();
        let model = LinearEmbeddingModel { a: DMatrix::from_element(1, 1, bad), b: DMatrix::zeros(1, 1), c: DMatrix::identity(1, 1), noise: None };
        let art = ModelArtifact::Linear { system: SystemSpec::duffing(0.01), lift: Lift::MlpFeatures(FeatureMap::identity(1)), model };
        prop_assert!(save_json(&dir.path().join("m.json"), &art).is_err());
    }

    #[test]
    fn train_reports_round_trip(vals in prop::collection::vec(awkward_floats(), 3..30)) {
        let dir = tempfile::tempdir().unwrap();
        let epochs: Vec<EpochRecord> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| EpochRecord { epoch: i, train_loss: *v, val_loss: -*v, best_val_loss: v * 0.5 })
            .collect();
        let report = TrainReport { epochs: epochs.clone(), best_epoch: 0, final_val_loss: vals[0], wall_time_s: 0.0 };
        let path = dir.path().join("r.csv");
        write_train_report(&path, &report).unwrap();
        let back = read_train_report(&path).unwrap();
        prop_assert_eq!(back.len(), epochs.len());
        for (a, b) in back.iter().zip(&epochs) {
            prop_assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            prop_assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
            prop_assert_eq!(a.best_val_loss.to_bits(), b.best_val_loss.to_bits());
        }
    }

    #[test]
    fn datasets_round_trip(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let plan = DataPlan {
            partitions: vec![
                PartitionPlan { label: Partition::Fit(1), n_traj: 3, traj_len: 4 },
                PartitionPlan { label: Partition::HeldOut, n_traj: 2, traj_len: 4 },
            ],
            ..DataPlan::default()
        };
        for sys in [SystemSpec::duffing(0.01), SystemSpec::cartpole(0.02)] {
            let ds = generate_dataset(&sys, &plan, seed, ExecMode::Parallel).unwrap();
            let path = dir.path().join("d.csv");
            write_dataset(&path, &ds).unwrap();
            prop_assert_eq!(read_dataset(&path).unwrap(), ds);
        }
    }
}

#[test]
fn reports_and_config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = WeightsReport {
        partitions: vec![Partition::Fit(1), Partition::Fit(2)],
        elpd: vec![-1.0e-300, 12.5],
        w: vec![0.25, 0.75],
        n_heldout: 50,
    };
    let p = dir.path().join("weights.json");
    save_json(&p, &w).unwrap();
    assert_eq!(load_json::<WeightsReport>(&p).unwrap(), w);

    let m = Metrics { rmse_per_step: vec![0.1, 0.2], total_rmse: None, validation_loss: Some(1.81e-5), elpds: vec![1.0], weights: vec![1.0] };
    let p = dir.path().join("metrics.json");
    save_json(&p, &m).unwrap();
    assert_eq!(load_json::<Metrics>(&p).unwrap(), m);

    let mut cfg = ExperimentConfig::for_system("cartpole");
    cfg.seed = u64::MAX;
    cfg.train.lr = 0.1 + 0.2;
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn report_csv_is_plain_rfc4180() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    save_json(&out.join("metrics.json"), &Metrics { total_rmse: Some(0.5), ..Metrics::default() }).unwrap();
    std::fs::create_dir_all(out.join("odd, \"name\"")).unwrap();
    save_json(&out.join("odd, \"name\"/x_metrics.json"), &Metrics { total_rmse: Some(2.0), ..Metrics::default() }).unwrap();
    let rows = kma::workbench::report(out).unwrap();
    assert_eq!(rows.len(), 2);
    let mut rdr = csv::Reader::from_path(out.join("report.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["source", "metric", "value"]);
    let recs: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().any(|r| &r[0] == "odd, \"name\"/x_metrics.json" && r[2].parse::<f64>().unwrap() == 2.0));
    // quoting is the RFC-4180 doubled-quote form
    let text = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(text.contains("\"odd, \"\"name\"\"/x_metrics.json\""));
}

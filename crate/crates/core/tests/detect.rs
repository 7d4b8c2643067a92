use actguard_core::evaluation::{auroc, ScoredSet};
use actguard_core::flow::{Coupling, FlowSpec, Mixing, Subnet};
use actguard_core::record::LayerSelection;
use actguard_core::sampling::{bridson_sample, extract_from_record};
use actguard_core::scoring::{choose_threshold, classify, FittedHead, Head};
use actguard_core::synth::synth_generate;
use actguard_core::trainer::{train, NoClock, TrainConfig};
use actguard_core::SeededRng;

fn features(records: &[actguard_core::record::ActivationRecord], key: &actguard_core::sampling::SamplingKey) -> Vec<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            extract_from_record(r, key, LayerSelection::Everywhere)
                .unwrap()
                .into_iter()
                .map(f64::from)
                .collect()
        })
        .collect()
}

#[test]
fn shifted_records_score_higher() {
    let mut rng = SeededRng::new(5);
    let dims = [8, 8, 2];
    let data = synth_generate(&mut rng, 400, 60, dims, 2.0, 0.5).unwrap();
    let key = bridson_sample(dims, 1.5, 1, 30).unwrap();
    let x = features(&data.records, &key);
    let (train_x, rest) = x.split_at(340);
    let spec = FlowSpec::new(key.dim(), 2, Coupling::Affine, Mixing::InvertibleLinear, Subnet::Linear);
    let config = TrainConfig {
        max_epochs: Some(5),
        ..TrainConfig::default()
    };
    let (flow, history) = train(train_x, spec, &config, &mut NoClock).unwrap();
    assert!(!history.epochs.is_empty());

    let latent = |v: &[Vec<f64>]| -> Vec<Vec<f64>> { v.iter().map(|x| flow.forward(x).unwrap().z).collect() };
    let train_z = latent(train_x);
    let (regular, anomalous) = rest.split_at(60);
    let (reg_z, anom_z) = (latent(regular), latent(anomalous));
    for head in [Head::Euclidean, Head::Mahalanobis, Head::Hbos { k: 20 }] {
        let fit = FittedHead::fit(head, &train_z).unwrap();
        let reg: Vec<f64> = reg_z.iter().map(|z| fit.tau(z)).collect();
        let anom: Vec<f64> = anom_z.iter().map(|z| fit.tau(z)).collect();
        let a = auroc(&ScoredSet::from_groups(&reg, &anom).unwrap()).unwrap();
        assert!(a > 0.9, "{head}: AUROC {a}");

        let theta = choose_threshold(&reg, 0.1).unwrap();
        let flagged = reg.iter().filter(|&&s| classify(s, theta)).count();
        assert!(flagged <= 6);
    }
}

#[test]
fn training_is_reproducible() {
    let mut rng = SeededRng::new(6);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
    let spec = FlowSpec::new(4, 3, Coupling::Gin, Mixing::RandomPermutation, Subnet::Mlp { width: 8 });
    let config = TrainConfig {
        max_epochs: Some(3),
        seed: 9,
        ..TrainConfig::default()
    };
    let (a, ha) = train(&x, spec, &config, &mut NoClock).unwrap();
    let (b, hb) = train(&x, spec, &config, &mut NoClock).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

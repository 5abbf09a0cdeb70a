use bhfa::encoder::Architecture;
use bhfa::episodes::{sample_episode, synth_blobs, EpisodeSpec, SynthParams};
use bhfa::eval::{embedding_fid, evaluate};
use bhfa::losses::LossConfig;
use bhfa::trainer::{episode_loss, train_step, TrainConfig, Trainer};
use bhfa::{EncoderModel, Tensor};

fn micro() -> (EncoderModel, bhfa::episodes::LabeledDataset) {
    let arch = Architecture::new(1, 8, vec![4, 8], 4).unwrap();
    let ds = synth_blobs(&SynthParams::new(2, 4, 8, 0.05, 21)).unwrap();
    (EncoderModel::new(arch, 21), ds)
}

fn rec_only() -> LossConfig {
    LossConfig { enable_bhs: false, enable_cce: false, ..LossConfig::default() }
}

fn mean_l1(a: &[&Tensor], b: &[Tensor]) -> f64 {
    let total: f64 = a.iter().zip(b).map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum::<f64>()).sum();
    total / a.iter().map(|t| t.len()).sum::<usize>() as f64
}

#[test]
fn one_step_lowers_the_episode_loss() {
    let (mut model, ds) = micro();
    let episode = sample_episode(&ds, &EpisodeSpec::new(2, 2, 2, 5)).unwrap();
    let cfg = TrainConfig { spec: EpisodeSpec::new(2, 2, 2, 0), seed: 9, ..TrainConfig::default() };
    let (_, noise, _) = cfg.episode_seeds(0);
    let before = episode_loss(&model, &episode, &cfg.loss, noise, None).unwrap().total;
    let rec = train_step(&mut model, &mut cfg.adam(), &episode, &cfg, 0).unwrap();
    assert_eq!(rec.total, before);
    let after = episode_loss(&model, &episode, &cfg.loss, noise, None).unwrap().total;
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn decoder_overfits_a_toy_set() {
    let (init, ds) = micro();
    let images: Vec<&Tensor> = ds.items().iter().map(|i| &i.image).collect();
    assert_eq!(images.len(), 8);
    // 2-way 2-shot 2-query covers all eight images every episode.
    let cfg = TrainConfig {
        episodes: 2000,
        lr: 1e-2,
        spec: EpisodeSpec::new(2, 2, 2, 0),
        loss: rec_only(),
        seed: 4,
        ..TrainConfig::default()
    };
    let untrained = init.reconstruct_from_mean(&images).unwrap();
    let mut trainer = Trainer::new(init.clone(), cfg).unwrap();
    trainer.run(&ds, |_| Ok(())).unwrap();
    let fitted = trainer.model().reconstruct_from_mean(&images).unwrap();

    let l1 = mean_l1(&images, &fitted);
    assert!(l1 < 0.05, "mean L1 after overfitting {l1}");
    assert!(l1 < mean_l1(&images, &untrained));

    // Features from an independent encoder of the same shape.
    let judge = EncoderModel::new(init.arch().clone(), 777);
    let fid = |recon: &[Tensor]| embedding_fid(&judge, &images, &recon.iter().collect::<Vec<_>>()).unwrap();
    let (before, after) = (fid(&untrained), fid(&fitted));
    assert!(after < before, "FID {before} -> {after}");
}

#[test]
fn embedding_fid_zero_for_identical_sets() {
    let (model, ds) = micro();
    let images: Vec<&Tensor> = ds.items().iter().map(|i| &i.image).collect();
    assert_eq!(embedding_fid(&model, &images, &images).unwrap(), 0.0);
    let noisy: Vec<Tensor> = images
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let data = t.data().iter().enumerate().map(|(j, v)| (v + 0.3 * (((j * 7 + k * 13) % 11) as f64 / 10.0 - 0.5)).clamp(0.0, 1.0));
            Tensor::new(t.shape().to_vec(), data.collect()).unwrap()
        })
        .collect();
    assert!(embedding_fid(&model, &images, &noisy.iter().collect::<Vec<_>>()).unwrap() > 0.0);
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let arch = Architecture::new(1, 8, vec![4, 8], 4).unwrap();
    let model = EncoderModel::new(arch, 3);
    let snapshot = model.clone();
    let ds = synth_blobs(&SynthParams::new(4, 10, 8, 0.05, 8)).unwrap();
    let a = evaluate(&model, &ds, &EpisodeSpec::new(3, 1, 4, 0), 4, 12).unwrap();
    let b = evaluate(&model, &ds, &EpisodeSpec::new(3, 1, 4, 0), 4, 12).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert!(model.params().iter().zip(snapshot.params()).all(|(p, q)| p.value == q.value));
}

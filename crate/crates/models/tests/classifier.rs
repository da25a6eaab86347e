use neurodecode_core::{Error, Rng, Tensor};
use neurodecode_data::scene::{generate_stimuli, Vocab};
use neurodecode_metrics::FeatureExtractor;
use neurodecode_models::*;

#[test]
fn taps_have_fixed_lengths_and_are_deterministic() {
    let cfg = ClassifierConfig { width: 4, classes: 3, ..Default::default() };
    let m = ConvClassifier::new(&cfg, 1).unwrap();
    let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut Rng::new(2));
    let shallow = ClassifierFeatures { model: &m, tap: Tap::Shallow };
    let deep = ClassifierFeatures { model: &m, tap: Tap::Deep };
    assert_eq!(shallow.features(&img).unwrap().len(), 4 * 16);
    assert_eq!(deep.features(&img).unwrap().len(), 8);
    assert_eq!(deep.features(&img).unwrap(), deep.features(&img).unwrap());
    assert_ne!(shallow.name(), deep.name());
    assert!(matches!(shallow.features(&Tensor::zeros(&[3, 8, 8])), Err(Error::Dim(_))));
}

#[test]
fn invalid_setups_are_rejected() {
    assert!(ConvClassifier::new(&ClassifierConfig { image_size: 12, ..Default::default() }, 0).is_err());
    assert!(ConvClassifier::new(&ClassifierConfig { classes: 1, ..Default::default() }, 0).is_err());
    let mut m = ConvClassifier::new(&ClassifierConfig { classes: 2, width: 2, ..Default::default() }, 0).unwrap();
    let imgs = vec![Tensor::zeros(&[3, 16, 16]); 2];
    assert!(matches!(train_classifier(&mut m, (&imgs, &[0, 2]), (&imgs, &[0, 1]), &ClassifierTrainConfig::default()), Err(Error::Config(_))));
}

#[test]
fn training_beats_chance() {
    let st = generate_stimuli(320, 8, 16, &Vocab::default(), &mut Rng::new(3)).unwrap();
    let imgs: Vec<Tensor> = st.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = st.iter().map(|s| s.label).collect();
    let mut m = ConvClassifier::new(&ClassifierConfig { classes: 8, ..Default::default() }, 4).unwrap();
    let rep = train_classifier(&mut m, (&imgs[..256], &labels[..256]), (&imgs[256..], &labels[256..]), &ClassifierTrainConfig::default()).unwrap();
    assert!(m.trained);
    assert!(rep.val_accuracy >= 3.0 / 8.0, "{rep:?}");
    assert!(rep.train_loss.last().unwrap() < &rep.train_loss[0]);
}

use fdmixup::model::{fsl_logits, FslHead, Graph, Group, Mode, ModelBundle, ModelConfig};
use fdmixup::tensor::{Tape, Tensor};

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        channels: [4, 4, 8, 8],
        feature_dim: 32,
        hidden_dim: 16,
        latent_dim: 8,
        num_classes: 5,
        ..ModelConfig::default()
    }
}

fn images(n: usize, size: usize, f: impl Fn(usize) -> f64) -> Tensor {
    Tensor::new(vec![n, 3, size, size], (0..n * 3 * size * size).map(f).collect()).unwrap()
}

fn eval_model(cfg: ModelConfig) -> ModelBundle {
    let mut m = ModelBundle::new(cfg, 3).unwrap();
    m.mode = Mode::Eval;
    m
}

fn features(m: &ModelBundle, x: Tensor) -> (Vec<usize>, Vec<f64>) {
    let mut g = Graph::new(m).unwrap();
    let x = g.input(x).unwrap();
    let f = g.extract_features(x).unwrap();
    (g.tape.shape(f).to_vec(), g.tape.data(f).to_vec())
}

#[test]
fn identical_images_give_identical_feature_rows() {
    let m = eval_model(ModelConfig::default());
    let one = images(1, 32, |i| ((i * 37) % 101) as f64 / 101.0);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let (shape, f) = features(&m, Tensor::new(vec![2, 3, 32, 32], two).unwrap());
    assert_eq!(shape, vec![2, 512]);
    assert_eq!(f[..512], f[512..]);
}

#[test]
fn zero_image_gives_finite_features() {
    let m = eval_model(small_config());
    let (_, f) = features(&m, Tensor::zeros(vec![1, 3, 16, 16]));
    assert!(f.iter().all(|v| v.is_finite()));

    // Training mode normalizes with the batch's own (zero) variance.
    let mut m = m;
    m.mode = Mode::Train;
    let (_, f) = features(&m, Tensor::zeros(vec![2, 3, 16, 16]));
    assert!(f.iter().all(|v| v.is_finite()));
}

#[test]
fn zero_noise_reparameterization_returns_the_means() {
    let m = ModelBundle::new(small_config(), 4).unwrap();
    let mut g = Graph::new(&m).unwrap();
    let x = g.input(images(3, 16, |i| (i % 7) as f64 * 0.1)).unwrap();
    let f = g.extract_features(x).unwrap();
    let z = Tensor::zeros(vec![3, 8]);
    let d = g.disentangle(f, Some((&z, &z))).unwrap();
    assert_eq!(g.tape.data(d.h1), g.tape.data(d.mean_a));
    assert_eq!(g.tape.data(d.h2), g.tape.data(d.mean_b));
}

#[test]
fn eval_mode_ignores_noise() {
    let m = eval_model(small_config());
    let mut g = Graph::new(&m).unwrap();
    let x = g.input(images(2, 16, |i| (i % 5) as f64 * 0.2)).unwrap();
    let f = g.extract_features(x).unwrap();
    let ones = Tensor::full(vec![2, 8], 1.0);
    let d = g.disentangle(f, Some((&ones, &ones))).unwrap();
    assert_eq!(g.tape.data(d.h1), g.tape.data(d.mean_a));
}

#[test]
fn unit_noise_with_zero_log_variance_shifts_the_mean_by_one() {
    let mut t = Tape::new();
    let mean = t.leaf(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let lv = t.leaf(Tensor::zeros(vec![1, 3])).unwrap();
    let e = t.constant(Tensor::full(vec![1, 3], 1.0)).unwrap();
    let h = t.reparameterize(mean, lv, e).unwrap();
    assert_eq!(t.data(h), &[1.5, 0.0, 3.0]);
}

#[test]
fn training_mode_without_noise_is_an_error() {
    let m = ModelBundle::new(small_config(), 4).unwrap();
    let mut g = Graph::new(&m).unwrap();
    let x = g.input(images(2, 16, |i| (i % 3) as f64)).unwrap();
    let f = g.extract_features(x).unwrap();
    assert!(g.disentangle(f, None).is_err());
}

fn zero_group(m: &mut ModelBundle, group: Group) {
    for (_, t) in m.set_mut(group).iter_mut() {
        t.data_mut().fill(0.0);
    }
}

#[test]
fn zero_classifier_gives_ln_c_cross_entropy() {
    let mut m = eval_model(small_config());
    zero_group(&mut m, Group::Classifier);
    let mut g = Graph::new(&m).unwrap();
    let h = g
        .tape
        .constant(Tensor::new(vec![2, 8], (0..16).map(|i| i as f64).collect()).unwrap())
        .unwrap();
    let logits = g.classify_fc(h).unwrap();
    assert!(g.tape.data(logits).iter().all(|&v| v == 0.0));
    let ce = g.tape.cross_entropy(logits, &[0, 4]).unwrap();
    assert!((g.tape.item(ce) - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn classifier_logits_have_one_row_per_input() {
    let m = eval_model(small_config());
    let mut g = Graph::new(&m).unwrap();
    let h = g.tape.constant(Tensor::full(vec![1, 8], 0.3)).unwrap();
    let logits = g.classify_fc(h).unwrap();
    assert_eq!(g.tape.shape(logits), &[1, 5]);
}

#[test]
fn zero_domain_classifier_is_uniform_and_row_deterministic() {
    let mut m = eval_model(small_config());
    zero_group(&mut m, Group::Domain);
    let mut g = Graph::new(&m).unwrap();
    let h = g
        .tape
        .constant(Tensor::new(vec![3, 8], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap())
        .unwrap();
    let d = g.domain_logits(h).unwrap();
    let p = g.tape.softmax(d).unwrap();
    assert!(g.tape.data(p).iter().all(|&v| v == 0.5));

    let m = eval_model(small_config());
    let mut g = Graph::new(&m).unwrap();
    let h = g.tape.constant(Tensor::full(vec![2, 8], 0.7)).unwrap();
    let d = g.domain_logits(h).unwrap();
    let rows = g.tape.data(d);
    assert_eq!(rows[..2], rows[2..]);
}

fn logits(head: FslHead, support: Vec<f64>, labels: &[usize], n_way: usize, query: Vec<f64>, dim: usize) -> Vec<f64> {
    let mut t = Tape::new();
    let ns = support.len() / dim;
    let nq = query.len() / dim;
    let s = t.constant(Tensor::new(vec![ns, dim], support).unwrap()).unwrap();
    let q = t.constant(Tensor::new(vec![nq, dim], query).unwrap()).unwrap();
    let l = fsl_logits(&mut t, head, s, labels, n_way, q).unwrap();
    t.data(l).to_vec()
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
}

#[test]
fn one_shot_query_equal_to_a_support_wins_strictly() {
    let support = vec![0.0, 1.0, 2.0, 5.0, -1.0, 0.5, 3.0, 3.0, 3.0];
    let l = logits(FslHead::Proto, support, &[0, 1, 2], 3, vec![5.0, -1.0, 0.5], 3);
    assert_eq!(l[1], 0.0);
    assert!(l[1] > l[0] && l[1] > l[2]);
}

#[test]
fn identical_supports_give_tied_logits() {
    for head in [FslHead::Proto, FslHead::GraphProp] {
        let support = [0.4, -0.2].repeat(6);
        let l = logits(head, support, &[0, 0, 1, 1, 2, 2], 3, vec![1.0, 2.0], 2);
        assert!(l.windows(2).all(|w| w[0] == w[1]), "{head:?}: {l:?}");
    }
}

#[test]
fn two_way_toy_picks_the_nearer_prototype() {
    let l = logits(FslHead::Proto, vec![0.0, 0.0, 1.0, 1.0], &[0, 1], 2, vec![0.0, 0.0], 2);
    assert_eq!(argmax(&l), 0);
    assert_eq!(l, vec![0.0, -2.0]);
}

#[test]
fn prototype_logits_do_not_depend_on_support_order() {
    let support = vec![0.1, 0.9, 0.3, -0.4, 1.2, 0.0, 0.7, 0.7];
    let labels = [0, 1, 0, 1];
    let perm = [2, 3, 0, 1];
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| support[2 * i..2 * i + 2].to_vec()).collect();
    let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    let q = vec![0.2, 0.2, 1.0, -1.0];
    let a = logits(FslHead::Proto, support, &labels, 2, q.clone(), 2);
    let b = logits(FslHead::Proto, permuted, &plabels, 2, q, 2);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let m = eval_model(small_config());
    let x = images(4, 16, |i| ((i * 13) % 17) as f64 / 17.0);
    assert_eq!(features(&m, x.clone()), features(&m, x));
}

use bialign::autodiff::Tape;
use bialign::checkpoint::Checkpoint;
use bialign::data::{decode_pgm, encode_pgm};
use bialign::edge::extract_edge_map;
use bialign::flow::FlowField;
use bialign::losses::{bce, hard_pixel_loss, ohem_ce, LossConfig};
use bialign::metrics::ConfusionMatrix;
use bialign::train::{poly_lr, TrainConfig};
use bialign::{EdgeMap, LabelMap, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

/// A random loss instance: logits `(1, c, h, w)`, labels with some ignored
/// pixels, indicator values and edge targets.
#[derive(Clone, Debug)]
struct LossCase {
    c: usize,
    h: usize,
    w: usize,
    logits: Vec<f64>,
    labels: Vec<u8>,
    d: Vec<f64>,
    edges: Vec<u8>,
}

fn loss_case() -> impl Strategy<Value = LossCase> {
    (2usize..5, 1usize..10, 1usize..10).prop_flat_map(|(c, h, w)| {
        let p = h * w;
        let label = prop_oneof![4 => 0..c as u8, 1 => Just(255u8)];
        (vec(-6.0..6.0f64, c * p), vec(label, p), vec(0.0..1.0f64, p), vec(0u8..2, p))
            .prop_map(move |(logits, labels, d, edges)| LossCase { c, h, w, logits, labels, d, edges })
    })
}

impl LossCase {
    fn logits(&self) -> Tensor<f64> {
        Tensor::from_vec((1, self.c, self.h, self.w), self.logits.clone()).unwrap()
    }

    fn labels(&self) -> LabelMap {
        LabelMap::new(1, self.h, self.w, self.labels.clone()).unwrap()
    }

    fn indicator(&self, d: &[f64]) -> Tensor<f64> {
        Tensor::from_vec((1, 1, self.h, self.w), d.to_vec()).unwrap()
    }

    fn ohem(&self, cfg: &LossConfig) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.param(self.logits());
        let l = ohem_ce(&mut tape, x, &self.labels(), cfg).unwrap();
        let v = tape.value(l).item().unwrap();
        (v, tape.backward(l).unwrap().get_or_zeros(x))
    }

    fn hard(&self, d: &[f64], cfg: &LossConfig) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.param(self.logits());
        let d = tape.constant(self.indicator(d));
        let l = hard_pixel_loss(&mut tape, x, &self.labels(), d, cfg).unwrap();
        let v = tape.value(l).item().unwrap();
        (v, tape.backward(l).unwrap().get_or_zeros(x))
    }

    fn bce(&self) -> f64 {
        let mut tape = Tape::new();
        let d = tape.constant(self.indicator(&self.d));
        let edges = EdgeMap::new(1, self.h, self.w, self.edges.clone()).unwrap();
        let l = bce(&mut tape, d, &edges).unwrap();
        tape.value(l).item().unwrap()
    }

    /// Gradient entries of the ignored pixels, over all classes.
    fn ignored_grads<'a>(&'a self, g: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        let p = self.h * self.w;
        (0..self.c).flat_map(move |k| (0..p).filter(|&i| self.labels[i] == 255).map(move |i| g[k * p + i]))
    }
}

fn label_map(max_side: usize, classes: u8) -> impl Strategy<Value = LabelMap> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        vec(prop_oneof![8 => 0..classes, 1 => Just(255u8)], h * w).prop_map(move |d| LabelMap::new(1, h, w, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative(case in loss_case(), keep in 0.01..1.0f64) {
        let cfg = LossConfig { hard_keep_fraction: keep, ..LossConfig::default() };
        prop_assert!(case.ohem(&cfg).0 >= 0.0);
        prop_assert!(case.hard(&case.d, &cfg).0 >= 0.0);
        prop_assert!(case.bce() >= 0.0);
    }

    #[test]
    fn hard_loss_ignores_indicator_below_threshold(case in loss_case(), shift in vec(0.0..1.0f64, 81)) {
        let cfg = LossConfig::default();
        let moved: Vec<f64> = case
            .d
            .iter()
            .zip(&shift)
            .map(|(&d, &s)| if d <= cfg.t_b { s * cfg.t_b } else { d })
            .collect();
        let (a, ga) = case.hard(&case.d, &cfg);
        let (b, gb) = case.hard(&moved, &cfg);
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert_eq!(ga, gb);
    }

    #[test]
    fn ignored_pixels_get_no_gradient(case in loss_case()) {
        let cfg = LossConfig { hard_keep_fraction: 1.0, ..LossConfig::default() };
        let (_, g) = case.ohem(&cfg);
        prop_assert!(case.ignored_grads(&g).all(|v| v == 0.0));
        let (_, g) = case.hard(&vec![0.9; case.d.len()], &cfg);
        prop_assert!(case.ignored_grads(&g).all(|v| v == 0.0));
    }

    #[test]
    fn poly_schedule_strictly_decreases(total in 1usize..5000, base in 1e-4..1.0f64, power in 0.1..3.0f64) {
        let cfg = TrainConfig { total_iters: total, base_lr: base, poly_power: power, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..=total).map(|i| poly_lr(i, &cfg).unwrap()).collect();
        prop_assert_eq!(lrs[0], base);
        prop_assert_eq!(lrs[total], 0.0);
        prop_assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn edges_ignore_label_identity(labels in label_map(24, 5), thickness in 1usize..4, shift in 1u8..250) {
        // Any injective relabelling keeps the same boundaries.
        let permuted = LabelMap::new(
            1, labels.h(), labels.w(),
            labels.data().iter().map(|&v| if v == 255 { 255 } else { (v + shift) % 255 }).collect(),
        ).unwrap();
        prop_assert_eq!(extract_edge_map(&labels, thickness).unwrap(), extract_edge_map(&permuted, thickness).unwrap());
    }

    #[test]
    fn edges_commute_with_flip(labels in label_map(24, 4), thickness in 1usize..4) {
        let direct = extract_edge_map(&labels.flip_horizontal(), thickness).unwrap();
        prop_assert_eq!(direct, extract_edge_map(&labels, thickness).unwrap().flip_horizontal());
    }

    #[test]
    fn thicker_edges_contain_thinner(labels in label_map(24, 3), thickness in 1usize..4) {
        let thin = extract_edge_map(&labels, thickness).unwrap();
        let thick = extract_edge_map(&labels, thickness + 1).unwrap();
        prop_assert!(thin.data().iter().zip(thick.data()).all(|(&a, &b)| a <= b));
    }

    #[test]
    fn pgm_round_trip(labels in label_map(40, 19)) {
        prop_assert_eq!(decode_pgm(&encode_pgm(&labels).unwrap()).unwrap(), labels);
    }

    #[test]
    fn miou_is_a_fraction_and_merges(
        pairs in vec((0u8..6, prop_oneof![6 => 0u8..6, 1 => Just(255u8)]), 1..300),
        split in 0usize..300,
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let mut whole = ConfusionMatrix::new(6);
        whole.accumulate(&pred, &truth, 255).unwrap();
        let m = whole.miou();
        prop_assert!((0.0..=1.0).contains(&m));
        if pred == truth {
            prop_assert!(m == 1.0 || truth.iter().all(|&t| t == 255));
        }

        let cut = split.min(pred.len());
        let mut parts = ConfusionMatrix::new(6);
        parts.accumulate(&pred[..cut], &truth[..cut], 255).unwrap();
        let mut rest = ConfusionMatrix::new(6);
        rest.accumulate(&pred[cut..], &truth[cut..], 255).unwrap();
        parts.merge(&rest).unwrap();
        prop_assert_eq!(parts, whole);
    }

    #[test]
    fn warp_stays_within_input_range(
        data in vec(-5.0..5.0f64, 2 * 36),
        flow in vec(-10.0..10.0f64, 2 * 36),
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec((1, 2, 6, 6), data.clone()).unwrap());
        let f = tape.constant(Tensor::from_vec((1, 2, 6, 6), flow).unwrap());
        let y = tape.warp_bilinear(x, FlowField::new(&tape, f).unwrap()).unwrap();
        for (c, plane) in tape.value(y).data().chunks(36).enumerate() {
            let src = &data[c * 36..(c + 1) * 36];
            let lo = src.iter().cloned().fold(f64::MAX, f64::min);
            let hi = src.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(plane.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), iteration in any::<u32>(), momentum in any::<bool>()) {
        let mut state = bialign::train::TrainState::new(&bialign::RunConfig {
            train: TrainConfig { seed, ..TrainConfig::default() },
            ..bialign::RunConfig::default()
        }).unwrap();
        state.iteration = iteration as usize;
        if momentum {
            for (name, t) in &state.model.params.tensors {
                state.velocity.insert(name.clone(), t.map(|v| -0.5 * v));
            }
        }
        let ckpt = Checkpoint::from_state(&state).unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        prop_assert!(back == ckpt);
        let restored = back.into_state().unwrap();
        prop_assert_eq!(restored.model.params, state.model.params);
        prop_assert_eq!(restored.iteration, state.iteration);
        prop_assert_eq!(restored.velocity, state.velocity);
    }
}

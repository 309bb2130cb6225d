use bialign::autodiff::Tape;
use bialign::checkpoint::Checkpoint;
use bialign::data::{generate_scene, sample_seed, Sample, SceneSpec};
use bialign::losses::total_loss;
use bialign::model::{Alignment, DIRECTIONS};
use bialign::nn::BnMode;
use bialign::train::{evaluate, train, Batch, LogRow, RunConfig, TrainConfig, TrainState};
use bialign::Model;

fn scenes(split: usize, count: usize) -> Vec<Sample> {
    let spec = SceneSpec::default();
    (0..count).map(|i| generate_scene(&spec, sample_seed(11, split, i)).unwrap()).collect()
}

fn short_run(iters: usize) -> RunConfig {
    RunConfig {
        train: TrainConfig { total_iters: iters, batch_size: 2, ..TrainConfig::default() },
        ..RunConfig::default()
    }
}

fn run_to_end(run: &RunConfig, state: &mut TrainState, set: &[Sample]) -> Vec<LogRow> {
    let mut rows = Vec::new();
    train(state, run, set, None, |r| {
        rows.push(r.clone());
        Ok(())
    })
    .unwrap();
    rows
}

#[test]
fn same_seed_same_run() {
    let (run, set) = (short_run(4), scenes(0, 4));
    let mut a = TrainState::new(&run).unwrap();
    let mut b = TrainState::new(&run).unwrap();
    assert_eq!(run_to_end(&run, &mut a, &set), run_to_end(&run, &mut b, &set));
    assert_eq!(a, b);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let (run, set) = (short_run(4), scenes(0, 4));
    let mut straight = TrainState::new(&run).unwrap();
    let rows = run_to_end(&run, &mut straight, &set);

    let mut first = TrainState::new(&run).unwrap();
    let stopped = train(&mut first, &run, &set, None, |r| match r.iter {
        2 => Err(bialign::Error::InvalidArgument("stop".into())),
        _ => Ok(()),
    });
    assert!(stopped.is_err());
    assert_eq!(first.iteration, 2);

    let bytes = Checkpoint::from_state(&first).unwrap().to_bytes().unwrap();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().into_state().unwrap();
    assert_eq!(run_to_end(&run, &mut resumed, &set), rows[2..]);
    assert_eq!(resumed, straight);
}

#[test]
fn every_alignment_trains_with_finite_gradients() {
    let set = scenes(0, 2);
    let batch = Batch::from_samples(&set, 1).unwrap();
    for alignment in Alignment::ALL {
        let mut run = short_run(1);
        run.model.alignment = alignment;
        let mut model = Model::<f32>::new(run.model.clone(), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let (out, vars) = model.forward(&mut tape, x, BnMode::Train).unwrap();
        let (loss, parts) =
            total_loss(&mut tape, out.logits, out.indicator, &batch.edges, &batch.labels, &run.loss).unwrap();
        assert!(parts.total.is_finite() && parts.total > 0.0, "{alignment:?}");
        let grads = tape.backward(loss).unwrap();
        for (name, &v) in &vars {
            assert!(grads.get_or_zeros(v).iter().all(|g| g.is_finite()), "{alignment:?} {name}");
        }
        for (dir, present) in DIRECTIONS.iter().zip(alignment.modules()) {
            let name = format!("align.{dir}.flow.weight");
            assert_eq!(vars.contains_key(&name), present.is_some(), "{alignment:?} {name}");
            if let Some(&v) = vars.get(&name) {
                assert!(grads.get_or_zeros(v).iter().any(|&g| g != 0.0), "{alignment:?} {name} gets no signal");
            }
        }
    }
}

#[test]
fn one_iteration_checkpoint_can_be_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    let (run, set) = (short_run(1), scenes(0, 2));
    let mut state = TrainState::new(&run).unwrap();
    run_to_end(&run, &mut state, &set);
    let path = dir.path().join("one.ckpt");
    Checkpoint::from_state(&state).unwrap().save(&path).unwrap();

    let mut loaded = Checkpoint::load(&path).unwrap().into_state().unwrap();
    assert_eq!(loaded.iteration, 1);
    let val = scenes(1, 2);
    let a = evaluate(&mut loaded.model, &val, 255).unwrap();
    let b = evaluate(&mut state.model, &val, 255).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.miou));
}

#[test]
fn smoothed_loss_goes_down() {
    let mut run = short_run(60);
    run.train.batch_size = 4;
    run.train.augment = false;
    let set = scenes(0, 8);
    let mut state = TrainState::new(&run).unwrap();
    let rows = run_to_end(&run, &mut state, &set);
    let mean = |r: &[LogRow]| r.iter().map(|r| r.loss.total).sum::<f64>() / r.len() as f64;
    let windows: Vec<f64> = rows.chunks(15).map(mean).collect();
    assert!(rows.iter().all(|r| r.loss.total.is_finite()));
    assert!(windows.last() < windows.first(), "{windows:?}");
    assert!(windows.windows(2).filter(|w| w[1] > w[0]).count() <= 1, "{windows:?}");
}

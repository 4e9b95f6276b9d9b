use sparse_forcing::rollout::{
    make_toy_denoiser, run_inference, run_inference_observed, run_training_schedule_at, AttentionEvent, Pass,
    RecallProbe, RolloutConfig, RolloutObserver,
};
use sparse_forcing::verify::check_inference_trace;

fn cfg(frames: usize, steps: usize) -> RolloutConfig {
    RolloutConfig {
        num_frames: frames,
        timesteps: RolloutConfig::even_timesteps(steps),
        seed: 11,
        ..RolloutConfig::default()
    }
}

#[derive(Default)]
struct Counter {
    denoise: usize,
    cache: usize,
    full_masks: usize,
    max_persistent: usize,
}

impl RolloutObserver for Counter {
    fn on_attention(&mut self, ev: &AttentionEvent<'_>) {
        match ev.pass {
            Pass::Denoise => self.denoise += 1,
            Pass::CacheUpdate => self.cache += 1,
        }
        if ev.mask.budget() == ev.mask.n_local_blocks {
            self.full_masks += 1;
        }
        self.max_persistent = self.max_persistent.max(ev.view.persistent.len());
    }
}

#[test]
fn observer_sees_every_unit_call() {
    let c = cfg(6, 2);
    let model = make_toy_denoiser(1);
    let mut counter = Counter::default();
    run_inference_observed(&c, &model, &mut counter).unwrap();
    let units = model.n_units();
    assert_eq!(counter.denoise, 6 * 2 * units);
    assert_eq!(counter.cache, 6 * units);
    assert!(counter.max_persistent <= c.capacity_blocks().unwrap());
    assert!(counter.max_persistent > 0);
}

#[test]
fn long_rollout_respects_bounds() {
    let c = RolloutConfig {
        topk_ratio: 0.0625,
        ..cfg(12, 4)
    };
    let out = run_inference(&c, &make_toy_denoiser(2)).unwrap();
    check_inference_trace(&c, &out.trace).unwrap();
    let last = out.trace.records.last().unwrap();
    for u in &last.units {
        // sinks from the first chunk survive to the end
        assert!(u.persistent.iter().any(|id| id.0 < c.blocks_per_chunk().unwrap() as u64));
        assert_eq!(u.persistent.len(), c.capacity_blocks().unwrap());
    }
}

#[test]
fn training_schedule_for_every_s() {
    let model = make_toy_denoiser(4);
    let c = cfg(4, 4);
    for s in 1..=4 {
        let tr = run_training_schedule_at(&c, &model, s, &mut ()).unwrap();
        assert_eq!(tr.trace.denoise_calls(), 4 * (4 - s + 1));
        for r in &tr.trace.records {
            assert_eq!(r.grad_enabled, Some(r.step == s));
            assert_eq!(r.cache_updated, r.step == s);
        }
    }
    assert!(run_training_schedule_at(&c, &model, 0, &mut ()).is_err());
    assert!(run_training_schedule_at(&c, &model, 5, &mut ()).is_err());
}

#[test]
fn recall_probe_is_monotone_in_ratio() {
    let c = RolloutConfig {
        window_frames: 12,
        ..cfg(8, 2)
    };
    let mut probe = RecallProbe::new(vec![0.125, 0.25, 0.5, 1.0], None);
    run_inference_observed(&c, &make_toy_denoiser(9), &mut probe).unwrap();
    let stats = probe.stats().unwrap();
    let means: Vec<f64> = stats.iter().map(|(_, s)| s.mean).collect();
    assert!(means.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{means:?}");
    assert!((means[3] - 1.0).abs() < 1e-6);
    assert!(stats.iter().all(|(_, s)| s.per_unit.iter().all(|u| (0.0..=1.0).contains(&u.recall))));
}

#[test]
fn alternate_block_shape() {
    let c = RolloutConfig {
        block_shape: sparse_forcing::blockify::BlockShape { b_t: 1, b_h: 8, b_w: 8 },
        capacity_frames: 3,
        ..cfg(5, 2)
    };
    let out = run_inference(&c, &make_toy_denoiser(0)).unwrap();
    check_inference_trace(&c, &out.trace).unwrap();
    assert_eq!(c.blocks_per_chunk().unwrap(), 3);
}

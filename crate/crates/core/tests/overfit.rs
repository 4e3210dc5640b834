// A desk-sized model must be able to memorize a handful of windows.
use dst_core::model::{DstModel, ModelConfig};
use dst_core::nn::{AdamW, OptimizerState};
use dst_core::noise::{corrupt_match, NoiseConfig};
use dst_core::pipeline::{generate, max_decode_len, MatchData};
use dst_core::sim::{simulate_match, SimConfig};

#[test]
fn fixed_batch_is_memorized() {
    let l = 250;
    let gt = simulate_match(&SimConfig::with_frames(2000), 3).unwrap();
    let cube = corrupt_match(&gt, &NoiseConfig::default(), 3).unwrap();
    let data = MatchData::new(0, &gt, cube);
    let windows: Vec<_> = (0..4)
        .map(|i| data.window(100 + i * l, l, true).unwrap())
        .collect();
    // dropout off: memorization is about capacity and the optimizer, not regularization
    let config = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::desk().with_context(l)
    };
    let mut model = DstModel::init(config, 0).unwrap();
    let mut state = OptimizerState::new(&model.params);
    let opt = AdamW::new(1e-3, 0.0);

    let mut last = f64::INFINITY;
    for _ in 0..500 {
        let mut sum: Option<Vec<Vec<f32>>> = None;
        last = 0.0;
        for w in &windows {
            let (loss, grads) = model
                .window_loss(&w.encoder, &w.targets, None, true)
                .unwrap();
            last += loss.total;
            let grads = grads.unwrap();
            sum = Some(match sum {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                    acc
                }
            });
        }
        last /= windows.len() as f64;
        opt.step(&mut model.params, &sum.unwrap(), &mut state)
            .unwrap();
    }
    assert!(last < 0.05, "mean loss after 500 steps: {last}");

    for w in &windows {
        let out = generate(&model, &w.encoder, max_decode_len(l)).unwrap();
        let key = |c, s, f| (c, s, f);
        let want: Vec<_> = w
            .targets
            .iter()
            .map(|t| key(t.category, t.slot, t.frame))
            .collect();
        let got: Vec<_> = out
            .tokens
            .iter()
            .map(|t| key(t.category, t.slot, t.frame))
            .collect();
        assert_eq!(got, want);
    }
}

use afd_core::ckpt::{dataset_from_checkpoint, Checkpoint};
use afd_core::config::RunConfig;
use afd_core::gcontext::GcBlockParams;
use afd_core::nn::{ConvParams, Params};
use afd_core::scene::batch_images;
use afd_core::tape::Tape;
use afd_core::toydet::{assign_targets_sampled, forward, DetectorParams, NegativeSampling};
use afd_core::train::load_detector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = RunConfig::load(std::path::Path::new("/tmp/afd_cal/student12.json")).unwrap();
    let ck = Checkpoint::load(std::path::Path::new("/tmp/afd_cal/t_full/teacher.ckpt")).unwrap();
    let (tspec, tparams) = load_detector(&ck).unwrap();
    let data = Checkpoint::load(std::path::Path::new("/tmp/afd_cal/data640.ckpt")).unwrap();
    let scenes = dataset_from_checkpoint(&data).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut student = DetectorParams::init(&cfg.student, &mut rng).unwrap();
    let mut rng3 = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng3.set_stream(3);
    let mut adapters: Vec<ConvParams> = (0..2)
        .map(|_| ConvParams::he_init(32, 8, 1, 1, 0, &mut rng3))
        .collect();
    let mut gc = GcBlockParams::init(32, 4, cfg.global_block.weight, &mut rng3).unwrap();

    let grid = cfg.student.anchor_grid();
    let mut sgd = afd_core::train::Sgd::new(0.05, 0.9, 1e-4);
    for step in 0..24 {
        let lo = (step * 8) % 512;
        let batch: Vec<&afd_core::scene::Scene> = scenes[lo..lo + 8].iter().collect();
        let images = batch_images(&batch, 64);
        let gts: Vec<_> = batch.iter().map(|s| s.objects.clone()).collect();
        let targets = assign_targets_sampled(&grid, &gts, 3, Some(NegativeSampling { seed: step as u64 }));

        // teacher fwd
        let mut tt = Tape::new();
        let (tf, th) = forward(&mut tt, &tspec, &tparams, &images).unwrap();

        let mut tape = Tape::new();
        let ts = student.tracked(&mut tape);
        let ta: Vec<ConvParams> = adapters.iter().map(|a| ConvParams { w: tape.watch(&a.w), b: tape.watch(&a.b), stride: 1, pad: 0 }).collect();
        let tg = gc.tracked(&mut tape);
        match afd_core::train::afd_step_diag(&cfg, &(tf, th), None, &cfg.student, &mut tape, &ts, &ta, &tg, &images, &targets) {
            Ok((loss, parts)) => {
                println!("step {step}: task {:.3} fd {:.3} fa {:.3} glob {:.4} cls {:.3} loc {:.3} rpn {:.3}", parts[0], parts[1], parts[2], parts[3], parts[4], parts[5], parts[6]);
                let grads = tape.backward(&loss).unwrap();
                sgd.step(&mut student, &ts, &grads).unwrap();
                for (a, t) in adapters.iter_mut().zip(&ta) {
                    let gw = grads.get(&t.w).unwrap().to_vec();
                    let gb = grads.get(&t.b).unwrap().to_vec();
                    let new_w: Vec<f64> = a.w.data().iter().zip(&gw).map(|(w, g)| w - 0.05 * g).collect();
                    let new_b: Vec<f64> = a.b.data().iter().zip(&gb).map(|(w, g)| w - 0.05 * g).collect();
                    a.w.set_data(new_w).unwrap();
                    a.b.set_data(new_b).unwrap();
                }
                let mut gc2 = gc.clone();
                sgd.step(&mut gc2, &tg, &grads).unwrap();
                gc = gc2;
            }
            Err(e) => {
                println!("step {step}: ERROR {e}");
                break;
            }
        }
    }
}

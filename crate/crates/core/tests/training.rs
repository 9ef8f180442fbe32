use dfkd::dataio::{synth_shapes, Split};
use dfkd::nets::{ArchDescriptor, Model};
use dfkd::pipeline::{self, OptimConfig, TrainSpec};

/// The synthetic shapes are learnable end to end: a two-class teacher
/// trained for ten epochs separates them almost perfectly.
#[test]
fn two_class_teacher_learns_synthetic_shapes() {
    let all = synth_shapes(2500, 2, 16, 31).unwrap();
    let train = all.subset(&(0..2000).collect::<Vec<_>>(), Split::Train).unwrap();
    let val = all.subset(&(2000..2500).collect::<Vec<_>>(), Split::Val).unwrap();
    let arch = ArchDescriptor::tapcnn(3, 16, vec![8, 16, 32], 2).unwrap();
    let mut model = Model::new(arch, None, 31).unwrap();
    let spec = TrainSpec {
        epochs: 10,
        batch_size: 64,
        optim: OptimConfig::FULL_PRECISION,
        seed: 31,
        schedule: None,
        kd: None,
    };
    let log = pipeline::train(&mut model, &train, &val, &spec).unwrap();
    let acc = pipeline::evaluate(&model, &val).unwrap();
    assert!(log.last().unwrap().train_loss < log[0].train_loss);
    assert!(acc >= 0.95, "validation accuracy {acc}");
}

//! Central finite differences against the tape's analytic gradients.

mod common;

use common::{classifier_gradcheck, gradcheck, random_tensor, weighted_sum, FD_TOLERANCE};
use gradgate::autodiff::{Conv2dAttrs, NodeId, Reduction, Tape};
use gradgate::gradfeat::ConfoundingLabel;
use gradgate::nn::{ArchSpec, Classifier};

fn assert_close(name: &str, (err, n): (f64, usize)) {
    assert!(n > 0, "{name}: nothing checked");
    assert!(err < FD_TOLERANCE, "{name}: relative error {err:e} over {n} coordinates");
}

fn unary(name: &str, lo: f64, hi: f64, op: impl Fn(&mut Tape, NodeId) -> NodeId) {
    let x = random_tensor(&[3, 5], lo, hi, 1);
    assert_close(
        name,
        gradcheck(&[x], 15, 2, |t, ids| {
            let y = op(t, ids[0]);
            weighted_sum(t, y, 3)
        }),
    );
}

#[test]
fn elementwise_ops() {
    unary("relu", -1.0, 1.0, |t, a| t.relu(a).unwrap());
    unary("sigmoid", -3.0, 3.0, |t, a| t.sigmoid(a).unwrap());
    unary("tanh", -2.0, 2.0, |t, a| t.tanh(a).unwrap());
    unary("log", 0.2, 3.0, |t, a| t.log(a).unwrap());
    unary("softplus", -4.0, 4.0, |t, a| t.softplus(a).unwrap());
    unary("clip", -1.0, 1.0, |t, a| t.clip(a, -0.5, 0.5).unwrap());
    unary("scale", -1.0, 1.0, |t, a| t.scale(a, -2.5).unwrap());
    unary("mean", -1.0, 1.0, |t, a| t.mean(a).unwrap());
    unary("reshape", -1.0, 1.0, |t, a| t.reshape(a, &[5, 3]).unwrap());
}

#[test]
fn binary_ops() {
    let a = random_tensor(&[4, 3], -1.0, 1.0, 10);
    let b = random_tensor(&[4, 3], -1.0, 1.0, 11);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let r = gradcheck(&[a.clone(), b.clone()], 12, 12, |t, ids| {
            let y = match which {
                0 => t.add(ids[0], ids[1]),
                1 => t.sub(ids[0], ids[1]),
                _ => t.mul(ids[0], ids[1]),
            }
            .unwrap();
            weighted_sum(t, y, 13)
        });
        assert_close(name, r);
    }
}

#[test]
fn matmul_and_dense_bias() {
    let x = random_tensor(&[4, 6], -1.0, 1.0, 20);
    let w = random_tensor(&[6, 3], -1.0, 1.0, 21);
    let b = random_tensor(&[3], -1.0, 1.0, 22);
    let r = gradcheck(&[x, w, b], 18, 23, |t, ids| {
        let z = t.matmul(ids[0], ids[1]).unwrap();
        let y = t.add_bias(z, ids[2]).unwrap();
        weighted_sum(t, y, 24)
    });
    assert_close("matmul+bias", r);
}

#[test]
fn conv2d_with_stride_padding_and_channel_bias() {
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        let x = random_tensor(&[2, 2, 6, 6], -1.0, 1.0, 30);
        let k = random_tensor(&[3, 2, 3, 3], -1.0, 1.0, 31);
        let b = random_tensor(&[3], -1.0, 1.0, 32);
        let r = gradcheck(&[x, k, b], 25, 33, |t, ids| {
            let c = t.conv2d(ids[0], ids[1], Conv2dAttrs { stride, padding }).unwrap();
            let y = t.add_bias(c, ids[2]).unwrap();
            weighted_sum(t, y, 34)
        });
        assert_close(&format!("conv2d stride {stride} padding {padding}"), r);
    }
}

#[test]
fn maxpool_and_channel_affine() {
    let x = random_tensor(&[2, 3, 4, 4], -1.0, 1.0, 40);
    let r = gradcheck(&[x], 30, 41, |t, ids| {
        let a = t.channel_affine(ids[0], &[0.5, 2.0, -1.0], &[0.1, 0.0, 0.3]).unwrap();
        let y = t.maxpool2d(a, 2).unwrap();
        weighted_sum(t, y, 42)
    });
    assert_close("maxpool+affine", r);
}

#[test]
fn losses() {
    let z = random_tensor(&[4, 5], -3.0, 3.0, 50);
    let r = gradcheck(&[z.clone()], 20, 51, |t, ids| {
        t.cross_entropy(ids[0], &[0, 3, 4, 1], Reduction::Mean).unwrap()
    });
    assert_close("cross_entropy mean", r);
    let r = gradcheck(&[z.clone()], 20, 52, |t, ids| {
        t.cross_entropy(ids[0], &[2, 2, 0, 1], Reduction::Sum).unwrap()
    });
    assert_close("cross_entropy sum", r);
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0].repeat(4);
    let r = gradcheck(&[z], 20, 53, |t, ids| t.bce_with_logits(ids[0], &targets).unwrap());
    assert_close("bce_with_logits", r);
}

#[test]
fn random_small_cnn_every_parameter_set() {
    let model = Classifier::build(ArchSpec::small_cnn([1, 16, 16], 10), 7).unwrap();
    let batch = random_tensor(&[2, 1, 16, 16], 0.0, 1.0, 60);
    let label = ConfoundingLabel::all_ones(10).unwrap();
    let r = classifier_gradcheck(&model, &batch, 15, 61, |t, logits| {
        t.bce_with_logits(logits, &label.values.repeat(2)).unwrap()
    });
    assert!(r.1 >= 100);
    assert_close("small cnn, confounding loss", r);
    let r = classifier_gradcheck(&model, &batch, 15, 62, |t, logits| {
        t.cross_entropy(logits, &[3, 8], Reduction::Mean).unwrap()
    });
    assert_close("small cnn, cross entropy", r);
}

#[test]
fn random_mlp_every_parameter_set() {
    let model = Classifier::build(ArchSpec::mlp([1, 6, 6], 16, 4), 8).unwrap();
    let batch = random_tensor(&[3, 1, 6, 6], 0.0, 1.0, 70);
    let r = classifier_gradcheck(&model, &batch, 40, 71, |t, logits| {
        t.cross_entropy(logits, &[0, 1, 3], Reduction::Mean).unwrap()
    });
    assert!(r.1 >= 100);
    assert_close("mlp", r);
}

#[test]
fn input_gradient_of_one_logit() {
    let model = Classifier::build(ArchSpec::small_cnn([1, 16, 16], 10), 9).unwrap();
    let x = random_tensor(&[1, 1, 16, 16], 0.0, 1.0, 80);
    let r = gradcheck(&[x], 40, 81, |t, ids| {
        let fwd = model.record(t, ids[0], false).unwrap();
        let picked = t.leaf(
            gradgate::Tensor::new(vec![1, 10], (0..10).map(|i| if i == 4 { 1.0 } else { 0.0 }).collect()).unwrap(),
            false,
        );
        let m = t.mul(fwd.logits, picked).unwrap();
        t.sum(m).unwrap()
    });
    assert_close("input gradient", r);
}

mod common;

use common::*;
use ctxdub::autograd::Tape;
use ctxdub::cda::{align_text_video, AlignmentMatrix};
use ctxdub::data::{select_context, ContextConfig};
use ctxdub::model::Model;
use ctxdub::nn::{ConvTranspose1d, Ctx};
use ctxdub::params::ParamStore;
use ctxdub::tensor::Matrix;
use rand::seq::SliceRandom;

#[test]
fn aligner_shapes_follow_lip_rate() {
    let mut r = rng(1);
    for (t_v, t_p, heads) in [(7, 3, 1), (1, 9, 2), (5, 5, 4)] {
        let (out, maps) = align_text_video(&random_matrix(&mut r, t_v, 8, 1.0), &random_matrix(&mut r, t_p, 8, 1.0), heads).unwrap();
        assert_eq!(out.shape(), (t_v, 8));
        assert_eq!(maps.len(), heads);
        assert!(maps.iter().all(|m| m.matrix().shape() == (t_v, t_p)));
    }
}

#[test]
fn aligner_rejects_bad_inputs() {
    let mut r = rng(2);
    assert!(align_text_video(&random_matrix(&mut r, 3, 4, 1.0), &random_matrix(&mut r, 3, 6, 1.0), 1).is_err());
    assert!(align_text_video(&random_matrix(&mut r, 3, 6, 1.0), &random_matrix(&mut r, 3, 6, 1.0), 4).is_err());
    assert!(align_text_video(&random_matrix(&mut r, 3, 4, 1.0), &Matrix::zeros(0, 4), 1).is_err());
}

#[test]
fn single_phoneme_copies_its_encoding_to_every_frame() {
    let mut r = rng(3);
    let pho = random_matrix(&mut r, 1, 6, 2.0);
    let (out, maps) = align_text_video(&random_matrix(&mut r, 5, 6, 2.0), &pho, 2).unwrap();
    assert!(maps[0].matrix().data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
    for t in 0..5 {
        for (a, b) in out.row(t).iter().zip(pho.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn matching_orthogonal_encodings_align_diagonally() {
    let h = Matrix::identity(4).scale(10.0);
    let (out, maps) = align_text_video(&h, &h, 1).unwrap();
    assert!(maps[0].matrix().max_abs_diff(&Matrix::identity(4)) < 1e-9);
    assert!(out.max_abs_diff(&h) < 1e-8);
}

#[test]
fn aligner_is_equivariant_to_phoneme_order() {
    let mut r = rng(4);
    let lip = random_matrix(&mut r, 6, 4, 1.5);
    let pho = random_matrix(&mut r, 5, 4, 1.5);
    let mut perm: Vec<usize> = (0..5).collect();
    perm.shuffle(&mut r);
    let shuffled = Matrix::from_rows(&perm.iter().map(|&i| pho.row(i).to_vec()).collect::<Vec<_>>());
    let (a, wa) = align_text_video(&lip, &pho, 1).unwrap();
    let (b, wb) = align_text_video(&lip, &shuffled, 1).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
    for t in 0..6 {
        for (j, &i) in perm.iter().enumerate() {
            assert!((wb[0].matrix()[(t, j)] - wa[0].matrix()[(t, i)]).abs() < 1e-15);
        }
    }
}

#[test]
fn mean_alignment_averages_heads() {
    let a = AlignmentMatrix(Matrix::from_rows(&[vec![1.0, 0.0]]));
    let b = AlignmentMatrix(Matrix::from_rows(&[vec![0.0, 1.0]]));
    assert_eq!(AlignmentMatrix::mean(&[a, b]).matrix().data(), &[0.5, 0.5]);
}

#[test]
fn encoder_output_depends_on_phoneme_order() {
    let corpus = micro_corpus(5, 4, 2);
    let model = Model::new(micro_config(&corpus.shape, 2), 1).unwrap();
    let mut tape = Tape::new();
    let mut cx = Ctx::eval(&mut tape, &model.store);
    let a = model.cda.encode_phonemes(&mut cx, &[1, 2, 3]).unwrap();
    let b = model.cda.encode_phonemes(&mut cx, &[3, 2, 1]).unwrap();
    let (a, b) = (cx.value(a).clone(), cx.value(b).clone());
    assert!(a.slice_rows(0, 1).max_abs_diff(&b.slice_rows(2, 3)) > 1e-6);
    assert!(model.cda.encode_phonemes(&mut cx, &[10]).is_err());
    assert!(model.cda.encode_phonemes(&mut cx, &[]).is_err());
}

#[test]
fn aligner_run_is_deterministic_and_mel_rate() {
    for n in [1, 2, 4] {
        let corpus = micro_corpus(6, 3, n);
        let model = Model::new(micro_config(&corpus.shape, n), 2).unwrap();
        let sel = select_context(&corpus.samples[0], &ContextConfig::default());
        let run = |text_context| {
            let mut tape = Tape::new();
            let mut cx = Ctx::eval(&mut tape, &model.store);
            let out = model.cda.run(&mut cx, &sel, text_context).unwrap();
            assert_eq!(cx.value(out.t_lip_pho).shape(), (n * sel.n_frames(), 8));
            assert_eq!(cx.value(out.h_lip_pho).rows(), sel.n_frames());
            cx.value(out.t_lip_pho).clone()
        };
        assert_eq!(run(true), run(true));
        if sel.phonemes.len() > sel.segment_phonemes(ctxdub::data::Segment::Current).len() {
            assert_ne!(run(true), run(false));
        }
    }
}

#[test]
fn aligner_rejects_mismatched_frame_ratio() {
    let corpus = micro_corpus(7, 2, 2);
    let model = Model::new(micro_config(&corpus.shape, 4), 0).unwrap();
    let sel = select_context(&corpus.samples[0], &ContextConfig::default());
    let mut tape = Tape::new();
    let mut cx = Ctx::eval(&mut tape, &model.store);
    assert!(model.cda.run(&mut cx, &sel, true).is_err());
}

/// Direct scatter of every input step through every kernel tap.
fn conv_transpose_oracle(x: &Matrix, w: &Matrix, b: &Matrix, stride: usize, kernel: usize) -> Matrix {
    let c = x.cols();
    let t_out = x.rows() * stride;
    let crop = (kernel - stride) / 2;
    let mut y = Matrix::zeros(t_out, c);
    for t in 0..x.rows() {
        for j in 0..kernel {
            let dst = (t * stride + j) as isize - crop as isize;
            if dst < 0 || dst as usize >= t_out {
                continue;
            }
            for co in 0..c {
                let mut s = 0.0;
                for ci in 0..c {
                    s += x[(t, ci)] * w[(ci, j * c + co)];
                }
                y[(dst as usize, co)] += s;
            }
        }
    }
    for r in 0..t_out {
        for co in 0..c {
            y[(r, co)] += b[(0, co)];
        }
    }
    y
}

#[test]
fn transposed_conv_matches_scatter_oracle_and_gradients() {
    let mut r = rng(8);
    for (stride, kernel) in [(1, 3), (2, 4), (4, 8), (2, 2)] {
        let mut store = ParamStore::new();
        let conv = ConvTranspose1d::new(&mut store, "up", 3, stride, kernel, &mut r);
        *store.get_mut(conv.bias) = random_matrix(&mut r, 1, 3, 0.5);
        let x = random_matrix(&mut r, 5, 3, 1.0);
        let probe = random_matrix(&mut r, 5 * stride, 3, 1.0);
        let loss = |store: &ParamStore, x: &Matrix| -> (f64, Matrix, Matrix) {
            let mut tape = Tape::new();
            let mut cx = Ctx::eval(&mut tape, store);
            let xi = cx.input(x.clone());
            let y = conv.forward(&mut cx, xi);
            let p = cx.tape.mul_const(y, probe.clone());
            let ones = cx.input(Matrix::filled(1, 5 * stride, 1.0));
            let s = cx.tape.matmul(ones, p);
            let ones_c = cx.input(Matrix::filled(3, 1, 1.0));
            let s = cx.tape.matmul(s, ones_c);
            let y_val = cx.value(y).clone();
            let g = cx.tape.backward(s, store.len());
            (cx.tape.value(s).item(), y_val, g.get_or_zeros(conv.weight, store.get(conv.weight).shape()))
        };
        let (_, y, gw) = loss(&store, &x);
        assert_eq!(y.rows(), 5 * stride);
        let oracle = conv_transpose_oracle(&x, store.get(conv.weight), store.get(conv.bias), stride, kernel);
        assert!(y.max_abs_diff(&oracle) < 1e-12);
        for j in 0..gw.len() {
            let mut s = store.clone();
            s.get_mut(conv.weight).data_mut()[j] += FD_STEP;
            let up = loss(&s, &x).0;
            s.get_mut(conv.weight).data_mut()[j] -= 2.0 * FD_STEP;
            let down = loss(&s, &x).0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            assert!(rel_err(gw.data()[j], numeric, FD_FLOOR) < 1e-6, "weight[{j}]");
        }
    }
}

#[test]
fn unit_stride_identity_kernel_is_a_no_op() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let conv = ConvTranspose1d::new(&mut store, "up", 4, 1, 1, &mut r);
    *store.get_mut(conv.weight) = Matrix::identity(4);
    let x = random_matrix(&mut r, 6, 4, 1.0);
    let mut tape = Tape::new();
    let mut cx = Ctx::eval(&mut tape, &store);
    let xi = cx.input(x.clone());
    let y = conv.forward(&mut cx, xi);
    assert_eq!(cx.value(y), &x);
}

#[test]
fn odd_strides_keep_the_exact_length() {
    let mut r = rng(10);
    for (stride, kernel) in [(1, 2), (3, 6), (5, 10)] {
        let mut store = ParamStore::new();
        let conv = ConvTranspose1d::new(&mut store, "up", 2, stride, kernel, &mut r);
        let x = random_matrix(&mut r, 7, 2, 1.0);
        let mut tape = Tape::new();
        let mut cx = Ctx::eval(&mut tape, &store);
        let xi = cx.input(x.clone());
        let y = conv.forward(&mut cx, xi);
        let oracle = conv_transpose_oracle(&x, store.get(conv.weight), store.get(conv.bias), stride, kernel);
        assert!(cx.value(y).max_abs_diff(&oracle) < 1e-12);
    }
}

#[test]
fn single_head_output_is_the_weighted_phoneme_sum() {
    let mut r = rng(11);
    let pho = random_matrix(&mut r, 7, 5, 2.0);
    let (out, maps) = align_text_video(&random_matrix(&mut r, 9, 5, 2.0), &pho, 1).unwrap();
    assert!(out.max_abs_diff(&maps[0].matrix().matmul(&pho)) < 1e-12);
}

#[test]
fn lip_encoder_is_nonlinear_and_rejects_empty_input() {
    let corpus = micro_corpus(12, 2, 2);
    let model = Model::new(micro_config(&corpus.shape, 2), 12).unwrap();
    let lip = random_matrix(&mut rng(12), 5, corpus.shape.d_lip, 1.0);
    let mut tape = Tape::new();
    let mut cx = Ctx::eval(&mut tape, &model.store);
    let a = model.cda.encode_lips(&mut cx, &lip).unwrap();
    let b = model.cda.encode_lips(&mut cx, &lip.scale(2.0)).unwrap();
    let (a, b) = (cx.value(a).clone(), cx.value(b).clone());
    assert_eq!(a.shape(), (5, 8));
    assert!(a.scale(2.0).max_abs_diff(&b) > 1e-3);
    assert!(a.max_abs_diff(&b) > 1e-6);
    assert!(model.cda.encode_lips(&mut cx, &Matrix::zeros(0, corpus.shape.d_lip)).is_err());
    assert!(model.cda.encode_lips(&mut cx, &Matrix::zeros(3, corpus.shape.d_lip + 1)).is_err());
}

#[test]
fn aligner_gradients_match_finite_differences() {
    let corpus = micro_corpus(13, 2, 2);
    let shape = &corpus.shape;
    let mut r = rng(13);
    let mut sample = corpus.samples[0].without_context();
    let bundle = &mut sample.current;
    bundle.phonemes = vec![1, 4, 7, 2, 9];
    bundle.lip_feats = random_matrix(&mut r, 4, shape.d_lip, 1.0);
    bundle.face_feats = random_matrix(&mut r, 4, shape.d_face, 1.0);
    bundle.mel = random_matrix(&mut r, 8, shape.n_mels, 1.0);
    bundle.voiced = vec![true, true, false, true, true, false, true, true];
    bundle.pitch = bundle.voiced.iter().map(|&v| if v { 140.0 } else { 0.0 }).collect();
    bundle.energy = vec![1.0; 8];
    let model = Model::new(ctxdub::model::ModelConfig { dim: 16, ..micro_config(shape, 2) }, 13).unwrap();
    let prep = ctxdub::model::Prepared::new(&sample, &ContextConfig::default(), &corpus.stats);
    assert_eq!((prep.sel.n_phonemes(), prep.sel.n_frames()), (5, 4));
    let report = audit_gradients(&model, &prep, ctxdub::model::Ablation::default(), &["cda."], 1e-3);
    assert_eq!(report.checked, model.store.ids_with_prefix("cda.").map(|id| model.store.get(id).len()).sum::<usize>());
    assert!(report.failures.is_empty(), "{:?}", &report.failures[..report.failures.len().min(5)]);
}

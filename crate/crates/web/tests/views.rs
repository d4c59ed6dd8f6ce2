use me_mhacl_web::{attention_view, loss_view, meiosis_view};

#[test]
fn meiosis_view_conserves_and_relabels() {
    let v = meiosis_view(3, 40, 17, 5).unwrap();
    assert!(v.conserved);
    assert_eq!((v.originals.len(), v.group_a.len(), v.group_b.len()), (6, 3, 3));
    for m in v.group_a.iter().chain(&v.group_b) {
        assert_ne!(m.prefix_subject, m.suffix_subject);
        let src = &v.originals[m.suffix_subject].data;
        assert_eq!(&m.data[17..], &src[17..]);
        assert_eq!(&m.data[..17], &v.originals[m.prefix_subject].data[..17]);
    }
    assert!(meiosis_view(2, 40, 1, 0).is_err());
}

#[test]
fn loss_view_tracks_alignment() {
    let loose = loss_view(6, 16, 0.1, 0.0, 3).unwrap();
    let tight = loss_view(6, 16, 0.1, 1.0, 3).unwrap();
    assert!(tight.total < tight.uniform && tight.total < loose.total);
    assert_eq!(tight.terms.len(), 12);
    let mean = tight.terms.iter().sum::<f64>() / 12.0;
    assert!((mean - tight.total).abs() < 1e-12);
    for i in 0..6 {
        assert!((tight.similarity[i][i + 6] - 1.0).abs() < 1e-12);
        assert!((loose.similarity[i][i] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_view_permutes_maps_but_not_representation() {
    let order = [2, 0, 3, 1];
    let v = attention_view(4, &order, 9).unwrap();
    assert!(v.max_abs_difference < 1e-12, "{}", v.max_abs_difference);
    for h in 0..v.heads {
        for i in 0..4 {
            assert!((v.weights[h][i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..4 {
                let w = v.permuted_weights[h][i][j] - v.weights[h][order[i]][order[j]];
                assert!(w.abs() < 1e-12);
            }
        }
    }
    assert!(attention_view(3, &[0, 0, 1], 0).is_err());
}

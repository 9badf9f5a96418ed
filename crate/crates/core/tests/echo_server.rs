// A zero-logit scorer served over TCP must be indistinguishable from the
// built-in zero-logit scorer, bit for bit, through the whole client path.

use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use markovmouth::fixtures::toy_vocabulary;
use markovmouth::mrf::{conditional, enumerate_states, partition_function_log, unnormalized_log_joint, Scorer};
use markovmouth::protocol::{serve_tcp, ClientOptions, Endpoint, ExternalScorer, ServeOptions};
use markovmouth::{MaskedSequence, Sequence, TabularScorer};

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

fn echo_endpoint(m: usize) -> Endpoint {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let scorer = Arc::new(TabularScorer::zero(toy_vocabulary(m)));
    thread::spawn(move || serve_tcp(scorer, listener, ServeOptions::default()));
    Endpoint::Tcp(addr.to_string())
}

#[test]
fn zero_echo_matches_builtin_zero_scorer() {
    let local = TabularScorer::zero(toy_vocabulary(3));
    let remote = ExternalScorer::connect(&echo_endpoint(3), Some(local.vocab()), &ClientOptions::default()).unwrap();
    for seq in enumerate_states(3, 3) {
        for t in 0..3 {
            for k in [None, Some(1), Some(2), Some(3)] {
                assert_eq!(
                    bits(&conditional(&local, &seq, t, k).unwrap()),
                    bits(&conditional(&remote, &seq, t, k).unwrap())
                );
            }
            let ms = MaskedSequence::new(&seq, t, local.vocab()).unwrap();
            assert_eq!(bits(&local.logits(&ms).unwrap()), bits(&remote.logits(&ms).unwrap()));
        }
        assert_eq!(
            unnormalized_log_joint(&local, &seq).unwrap().to_bits(),
            unnormalized_log_joint(&remote, &seq).unwrap().to_bits()
        );
    }
    assert_eq!(
        partition_function_log(&local, 3).unwrap().to_bits(),
        partition_function_log(&remote, 3).unwrap().to_bits()
    );
    let masked = Sequence::new(vec![3, 0, 3]).unwrap();
    assert_eq!(local.logits_all(&masked).unwrap(), remote.logits_all(&masked).unwrap());
}

#[test]
fn mismatched_vocabulary_is_refused() {
    let endpoint = echo_endpoint(4);
    let err = ExternalScorer::connect(&endpoint, Some(&toy_vocabulary(3)), &ClientOptions::default()).unwrap_err();
    assert!(err.to_string().contains("\"d\""), "{err}");
}

//! The external model interface and an offline stand-in.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use super::{format_conversation, Role, Turn, VlmRequest};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VlmError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response: {0}")]
    Format(String),
    #[error("configuration: {0}")]
    Config(String),
}

/// Sends one request, returns the raw reply text.
pub trait VlmClient: Sync {
    fn complete(&self, request: &VlmRequest) -> Result<String, VlmError>;
}

/// Deterministic client: answers with a templated conversation that
/// grounds every region description of the request to its marker.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockVlmClient;

fn phrase(description: &str) -> String {
    let cleaned: String = description.chars().map(|c| if c == '<' || c == '>' { ' ' } else { c }).collect();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    if words.is_empty() {
        "an object".to_string()
    } else {
        words.join(" ")
    }
}

impl VlmClient for MockVlmClient {
    fn complete(&self, request: &VlmRequest) -> Result<String, VlmError> {
        let spans: Vec<String> = request
            .context
            .region_descriptions
            .iter()
            .map(|(label, d)| format!("<p>{}</p> <roi><r{label}></roi>", phrase(d)))
            .collect();
        let listing = match spans.split_last() {
            None => return Err(VlmError::Format("request has no regions".into())),
            Some((last, [])) => last.clone(),
            Some((last, rest)) => format!("{} and {last}", rest.join(", ")),
        };
        let mut turns = vec![
            Turn { role: Role::User, text: "What can you see in this image?".into() },
            Turn { role: Role::Assistant, text: format!("The image shows {listing}.") },
        ];
        if let Some(m) = request.marked_image.markers.last() {
            let d = &request.context.region_descriptions[&m.label];
            turns.push(Turn { role: Role::User, text: format!("Where exactly is {}?", phrase(d)) });
            turns.push(Turn {
                role: Role::Assistant,
                text: format!(
                    "<p>It</p> <roi><r{}></roi> is centred near pixel ({}, {}).",
                    m.label,
                    m.center.0.round(),
                    m.center.1.round()
                ),
            });
        }
        Ok(format_conversation(&turns))
    }
}

/// Run `requests` with at most `max_in_flight` concurrent calls. Results
/// are in input order whatever the completion order.
pub fn run_requests(
    client: &dyn VlmClient,
    requests: &[&VlmRequest],
    max_in_flight: usize,
) -> Vec<Result<String, VlmError>> {
    let workers = max_in_flight.max(1).min(requests.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<String, VlmError>>>> = Mutex::new(vec![None; requests.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(i) else { break };
                let reply = client.complete(req);
                slots.lock().expect("result lock")[i] = Some(reply);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every request answered"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::instruct::{assemble_request, place_markers, postfilter_one, RegionAnnotation, VlmContext};
    use std::time::Duration;

    fn request(id: u64, n: usize) -> VlmRequest {
        let regions: Vec<_> = (0..n)
            .map(|i| {
                let x = i as f64 * 10.0;
                RegionAnnotation::new(BoundingBox::new(x, 0., x + 5., 5.).unwrap(), format!("<thing> {i}"))
            })
            .collect();
        let spec = place_markers(id, &regions).unwrap();
        assemble_request(&spec, &VlmContext::from_regions(&regions), &[], 0).unwrap()
    }

    #[test]
    fn mock_replies_pass_postfilter() {
        for n in 1..=10 {
            let req = request(n as u64, n);
            let reply = MockVlmClient.complete(&req).unwrap();
            let rec = postfilter_one(&reply, &req.marked_image);
            assert!(rec.valid, "{reply}\n{:?}", rec.error);
            assert_eq!(rec.referenced_labels.len(), n);
        }
    }

    struct Slow;
    impl VlmClient for Slow {
        fn complete(&self, request: &VlmRequest) -> Result<String, VlmError> {
            // later requests finish first
            std::thread::sleep(Duration::from_millis(20 - request.image_id()));
            if request.image_id() == 3 {
                return Err(VlmError::Transport("boom".into()));
            }
            Ok(request.image_id().to_string())
        }
    }

    #[test]
    fn results_keep_input_order() {
        let reqs: Vec<VlmRequest> = (0..12).map(|i| request(i, 1)).collect();
        let refs: Vec<&VlmRequest> = reqs.iter().collect();
        for jobs in [1, 4, 32] {
            let out = run_requests(&Slow, &refs, jobs);
            for (i, r) in out.iter().enumerate() {
                if i == 3 {
                    assert!(r.is_err());
                } else {
                    assert_eq!(r.as_ref().unwrap(), &i.to_string());
                }
            }
        }
        assert!(run_requests(&Slow, &[], 4).is_empty());
    }
}

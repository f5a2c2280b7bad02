//! Wire-contract conformance: one scripted client drives garment selection,
//! state reset, frames and a flood against a live server.

mod common;

use common::*;

fn line(name: &str, pass: bool, detail: String) -> bool {
    println!("[{}] wire contract, {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

async fn status(c: &mut Client, event: StatusEvent) {
    until(c, |m| matches!(m, ServerMessage::Status(s) if s.event == Some(event)).then_some(())).await;
}

#[tokio::test]
async fn acceptance() {
    let f = start(4).await;
    let mut c = connect(&f).await;
    let mut results = Vec::new();

    let ids = match recv(&mut c).await {
        ServerMessage::GarmentList { items } => items.into_iter().map(|i| i.id).collect::<Vec<_>>(),
        other => panic!("expected garment_list first, got {other:?}"),
    };
    status(&mut c, StatusEvent::GarmentSelected).await;
    results.push(line("garment_list", ids == ["a", "b"], format!("list on connect {ids:?}, first garment selected")));

    send(&mut c, &ClientMessage::SelectGarment { garment_id: "b".into() }).await;
    status(&mut c, StatusEvent::GarmentSelected).await;
    let mut worst: f32 = 0.0;
    for t in 0..3u64 {
        send(&mut c, &frame_msg(&f.frames[t as usize], t)).await;
        let (got, out) = tryon_frame(&mut c).await;
        assert_eq!(got, t);
        worst = worst.max(out.max_abs_diff(&direct(&f, &f.nets[1], &(0..=t).collect::<Vec<_>>())).unwrap());
    }
    results.push(line(
        "select_garment + frame",
        worst <= 1e-6,
        format!("3 frames after selecting `b` vs a fresh local session of `b`: max abs diff {worst:.1e} (tol 1e-6)"),
    ));

    send(&mut c, &ClientMessage::ResetState).await;
    status(&mut c, StatusEvent::StateReset).await;
    send(&mut c, &frame_msg(&f.frames[3], 3)).await;
    let (_, out) = tryon_frame(&mut c).await;
    let fresh = out.max_abs_diff(&direct(&f, &f.nets[1], &[3])).unwrap();
    let carried = out.max_abs_diff(&direct(&f, &f.nets[1], &[0, 1, 2, 3])).unwrap();
    results.push(line(
        "reset_state",
        fresh <= 1e-6 && carried > 0.0,
        format!("frame after reset vs zero-state session {fresh:.1e} (tol 1e-6), vs carried state {carried:.1e}"),
    ));

    let (first, count) = (4u64, 80u64);
    for t in first..first + count {
        c.feed(Message::text(serde_json::to_string(&frame_msg(&f.frames[(t % 6) as usize], t)).unwrap())).await.unwrap();
    }
    c.flush().await.unwrap();
    let mut answered = vec![0u32; count as usize];
    let (mut drops, mut last_t, mut ordered, mut max_pending) = (0, None::<u64>, true, 0);
    while answered.iter().sum::<u32>() < count as u32 {
        match recv(&mut c).await {
            ServerMessage::TryonFrame { t, .. } => {
                ordered &= last_t.is_none_or(|l| t > l);
                last_t = Some(t);
                answered[(t - first) as usize] += 1;
            }
            ServerMessage::Status(s) => {
                max_pending = max_pending.max(s.pending);
                if let Some(t) = s.dropped {
                    answered[(t - first) as usize] += 1;
                    drops += 1;
                }
            }
            ServerMessage::Error { code, .. } => panic!("unexpected error {code:?}"),
            ServerMessage::GarmentList { .. } => {}
        }
    }
    let once = answered.iter().all(|&n| n == 1);
    results.push(line(
        "flood",
        once && ordered && drops > 0 && max_pending <= 1 && last_t == Some(first + count - 1),
        format!(
            "{count} frames sent at once: each t answered once {once}, {drops} dropped, tryon_frame t increasing \
             {ordered}, max pending {max_pending}, last frame rendered {last_t:?}"
        ),
    ));
    assert!(results.iter().all(|&r| r));
}

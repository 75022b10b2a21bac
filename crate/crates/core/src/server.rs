//! WebSocket endpoint. Each socket is bridged onto the same channel pair
//! the loopback client uses, so the connection driver is shared.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use crate::session::{serve_connection, Host, OUTPUT_BUFFER};
use crate::wire::{Frame, SESSION_PATH, SUBPROTOCOL};

const INCOMING_BUFFER: usize = 256;
/// How long shutdown waits for open sessions to close.
pub const SHUTDOWN_GRACE: Duration = Duration::from_secs(5);

pub fn router(host: Arc<Host>) -> Router {
    Router::new().route(SESSION_PATH, get(upgrade)).with_state(host)
}

async fn upgrade(ws: WebSocketUpgrade, State(host): State<Arc<Host>>) -> Response {
    ws.protocols([SUBPROTOCOL])
        .on_upgrade(move |socket| handle_socket(socket, host))
}

fn to_message(frame: Frame) -> Message {
    match frame {
        Frame::Text(t) => Message::Text(t.into()),
        Frame::Binary(b) => Message::Binary(b),
    }
}

async fn handle_socket(socket: WebSocket, host: Arc<Host>) {
    let (mut sink, mut stream) = socket.split();
    let (to_driver, incoming) = mpsc::channel(INCOMING_BUFFER);
    let (out, mut outgoing) = mpsc::channel::<Frame>(OUTPUT_BUFFER);
    let mut driver = tokio::spawn(serve_connection(host, incoming, out));
    let writer = tokio::spawn(async move {
        while let Some(frame) = outgoing.recv().await {
            if sink.send(to_message(frame)).await.is_err() {
                return;
            }
        }
        let _ = sink.send(Message::Close(None)).await;
    });
    loop {
        let msg = tokio::select! {
            biased;
            _ = &mut driver => break,
            m = stream.next() => m,
        };
        let frame = match msg {
            Some(Ok(Message::Text(t))) => Frame::Text(t.as_str().to_owned()),
            Some(Ok(Message::Binary(b))) => Frame::Binary(b),
            Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
            Some(Ok(Message::Close(_)) | Err(_)) | None => break,
        };
        if to_driver.send(frame).await.is_err() {
            break;
        }
    }
    drop(to_driver);
    if !driver.is_finished() {
        let _ = driver.await;
    }
    let _ = writer.await;
}

/// Serves until `shutdown` resolves, then closes every session and waits
/// up to [`SHUTDOWN_GRACE`] for them to finish.
pub async fn serve<F>(listener: TcpListener, host: Arc<Host>, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    let app = router(host.clone());
    let signal_host = host.clone();
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            tracing::info!("shutting down");
            signal_host.shutdown();
        })
        .await?;
    let drained = tokio::time::timeout(SHUTDOWN_GRACE, async {
        while host.limiter.active() > 0 {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    })
    .await;
    if drained.is_err() {
        tracing::warn!(active = host.limiter.active(), "sessions still open at exit");
    }
    Ok(())
}

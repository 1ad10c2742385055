use std::io::{ErrorKind, Read, Write};
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::wire::{encode, FrameDecoder, RoundEnvelope};
use crate::{Error, Result};

/// A reliable, ordered, bidirectional envelope pipe.
pub trait Connection: Send {
    fn send(&mut self, envelope: &RoundEnvelope) -> Result<()>;
    fn recv(&mut self) -> Result<RoundEnvelope>;
}

/// Frames over any byte stream, e.g. a `TcpStream`.
pub struct StreamConnection<S> {
    stream: S,
    decoder: FrameDecoder,
    buf: Box<[u8]>,
}

impl<S: Read + Write + Send> StreamConnection<S> {
    pub fn new(stream: S) -> Self {
        StreamConnection {
            stream,
            decoder: FrameDecoder::new(),
            buf: vec![0; 64 * 1024].into_boxed_slice(),
        }
    }

    pub fn get_ref(&self) -> &S {
        &self.stream
    }
}

impl<S: Read + Write + Send> Connection for StreamConnection<S> {
    fn send(&mut self, envelope: &RoundEnvelope) -> Result<()> {
        let bytes = encode(envelope)?;
        self.stream.write_all(&bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<RoundEnvelope> {
        loop {
            if let Some(env) = self.decoder.next_frame()? {
                return Ok(env);
            }
            let n = match self.stream.read(&mut self.buf) {
                Ok(n) => n,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) if e.kind() == ErrorKind::ConnectionReset => return Err(Error::Disconnected),
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                return Err(Error::Disconnected);
            }
            self.decoder.push(&self.buf[..n]);
        }
    }
}

/// In-process endpoint; frames travel as encoded bytes over a channel.
pub struct ChannelConnection {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    decoder: FrameDecoder,
}

/// Two connected in-process endpoints.
pub fn channel_pair() -> (ChannelConnection, ChannelConnection) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    let end = |tx, rx| ChannelConnection {
        tx,
        rx,
        decoder: FrameDecoder::new(),
    };
    (end(a_tx, a_rx), end(b_tx, b_rx))
}

impl Connection for ChannelConnection {
    fn send(&mut self, envelope: &RoundEnvelope) -> Result<()> {
        self.tx.send(encode(envelope)?).map_err(|_| Error::Disconnected)
    }

    fn recv(&mut self) -> Result<RoundEnvelope> {
        loop {
            if let Some(env) = self.decoder.next_frame()? {
                return Ok(env);
            }
            let bytes = self.rx.recv().map_err(|_| Error::Disconnected)?;
            self.decoder.push(&bytes);
        }
    }
}

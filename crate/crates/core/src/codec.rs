//! Length-prefixed canonical encoding. Every field is written as a
//! big-endian u32 length followed by its octets, in a fixed order per type.

use thiserror::Error;

use crate::crypto::{Digest, DhPublic, Nonce, PublicKey, Signature};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed encoding: {0}")]
pub struct DecodeError(pub &'static str);

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, field: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(&(field.len() as u32).to_be_bytes());
        self.buf.extend_from_slice(field);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.bytes(&[v])
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.bytes(&d.0)
    }

    pub fn opt_digest(&mut self, d: Option<&Digest>) -> &mut Self {
        match d {
            Some(d) => self.u8(1).digest(d),
            None => self.u8(0),
        }
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Reader { rest: input }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        if self.rest.len() < 4 {
            return Err(DecodeError("truncated length"));
        }
        let (len, rest) = self.rest.split_at(4);
        let len = u32::from_be_bytes(len.try_into().unwrap()) as usize;
        if rest.len() < len {
            return Err(DecodeError("truncated field"));
        }
        let (field, rest) = rest.split_at(len);
        self.rest = rest;
        Ok(field)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        match self.bytes()? {
            [v] => Ok(*v),
            _ => Err(DecodeError("expected one octet")),
        }
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        let b = self.bytes()?;
        Ok(u64::from_be_bytes(
            b.try_into().map_err(|_| DecodeError("expected u64"))?,
        ))
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| DecodeError("invalid utf-8"))
    }

    pub fn array32(&mut self) -> Result<[u8; 32], DecodeError> {
        self.bytes()?
            .try_into()
            .map_err(|_| DecodeError("expected 32 octets"))
    }

    pub fn digest(&mut self) -> Result<Digest, DecodeError> {
        self.array32().map(Digest)
    }

    pub fn opt_digest(&mut self) -> Result<Option<Digest>, DecodeError> {
        match self.u8()? {
            0 => Ok(None),
            1 => self.digest().map(Some),
            _ => Err(DecodeError("bad option tag")),
        }
    }

    pub fn nonce(&mut self) -> Result<Nonce, DecodeError> {
        self.bytes()?
            .try_into()
            .map(Nonce)
            .map_err(|_| DecodeError("expected 12-octet nonce"))
    }

    pub fn public_key(&mut self) -> Result<PublicKey, DecodeError> {
        self.array32().map(PublicKey)
    }

    pub fn dh_public(&mut self) -> Result<DhPublic, DecodeError> {
        self.array32().map(DhPublic)
    }

    pub fn signature(&mut self) -> Result<Signature, DecodeError> {
        Signature::from_slice(self.bytes()?).ok_or(DecodeError("expected 64-octet signature"))
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(DecodeError("trailing octets"))
        }
    }
}

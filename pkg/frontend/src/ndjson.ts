/**
 * Line-delimited JSON decoding for the diagnose / instruct event streams.
 *
 * The feeder is byte-chunk agnostic: network chunks may split a JSON object
 * anywhere, so it buffers until each newline and parses complete lines only.
 */

export class NdjsonFeeder {
  private buffer = '';

  /** Feed one text chunk; returns the objects completed by this chunk. */
  feed(chunk: string): unknown[] {
    this.buffer += chunk;
    const out: unknown[] = [];
    let newline = this.buffer.indexOf('\n');
    while (newline >= 0) {
      const line = this.buffer.slice(0, newline).trim();
      this.buffer = this.buffer.slice(newline + 1);
      if (line.length > 0) {
        out.push(JSON.parse(line));
      }
      newline = this.buffer.indexOf('\n');
    }
    return out;
  }

  /** Flush a trailing line that arrived without a final newline. */
  finish(): unknown[] {
    const line = this.buffer.trim();
    this.buffer = '';
    return line.length > 0 ? [JSON.parse(line)] : [];
  }
}

/** Decode a streamed HTTP body into parsed ndjson objects, in order. */
export async function* readNdjson(body: ReadableStream<Uint8Array>): AsyncGenerator<unknown> {
  const reader = body.getReader();
  const decoder = new TextDecoder();
  const feeder = new NdjsonFeeder();
  try {
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      for (const obj of feeder.feed(decoder.decode(value, { stream: true }))) {
        yield obj;
      }
    }
    for (const obj of feeder.feed(decoder.decode())) {
      yield obj;
    }
    for (const obj of feeder.finish()) {
      yield obj;
    }
  } finally {
    reader.releaseLock();
  }
}

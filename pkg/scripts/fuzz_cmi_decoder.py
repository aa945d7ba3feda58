"""Fuzz the CMI stream decoder: arbitrary bytes, arbitrary chunking.

Run for a fixed budget, e.g.:
    python scripts/fuzz_cmi_decoder.py -max_total_time=60
"""

import sys

import atheris

with atheris.instrument_imports():
    from src.cmi import CmiMessage, DecodeError, StreamDecoder


def test_one_input(data):
    fdp = atheris.FuzzedDataProvider(data)
    chunk = fdp.ConsumeIntInRange(1, 64)
    payload = fdp.ConsumeBytes(atheris.ALL_REMAINING)

    decoder = StreamDecoder()
    for start in range(0, len(payload), chunk):
        for item in decoder.feed(payload[start:start + chunk]):
            if not isinstance(item, (CmiMessage, DecodeError)):
                raise AssertionError(f"decoder yielded {type(item).__name__}")

    if decoder.fed != decoder.consumed + decoder.discarded + decoder.buffered:
        raise AssertionError(
            f"unaccounted bytes: fed={decoder.fed} consumed={decoder.consumed} "
            f"discarded={decoder.discarded} buffered={decoder.buffered}"
        )


def main():
    atheris.Setup(sys.argv, test_one_input)
    atheris.Fuzz()


if __name__ == "__main__":
    main()

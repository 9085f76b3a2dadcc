from decimal import Decimal
import struct
from unittest import TestCase

import numpy as np

from idp3.utils import BinaryReader, content_hash, derive_seed, duration, make_rng


class DurationTest(TestCase):
    minute = 60
    hour = minute * 60
    day = hour * 24

    def test_negative(self) -> None:
        with self.assertRaisesRegex(ValueError, "Positive number expected, given: -245"):
            duration(-245)

    def test_bad_string(self) -> None:
        with self.assertRaisesRegex(ValueError, "Number of seconds expected..."):
            duration('banana')                              # type: ignore[arg-type]

    def test_bad_type(self) -> None:
        with self.assertRaisesRegex(ValueError, "Number of seconds expected, given: None"):
            duration(None)                                  # type: ignore[arg-type]

    def test_other_numeric(self) -> None:
        self.assertEqual(duration(42.2), '42.20 seconds')
        self.assertEqual(
            duration(Decimal('42.0')),                      # type: ignore[arg-type]
            '42 seconds',
        )

    def test_days(self) -> None:
        self.assertEqual(duration(13 * self.day), '13 days')
        self.assertEqual(duration(48 * self.hour), '2 days')

    def test_hours(self) -> None:
        self.assertEqual(duration(47 * self.hour), '47 hours')
        self.assertEqual(duration(120 * self.minute), '2 hours')

    def test_minutes(self) -> None:
        self.assertEqual(duration(119 * self.minute), '119 minutes')
        self.assertEqual(duration(300), '5 minutes')
        self.assertEqual(duration(120), '2 minutes')

    def test_seconds(self) -> None:
        self.assertEqual(duration(119), '119 seconds')
        self.assertEqual(duration(90), '90 seconds')
        self.assertEqual(duration(42), '42 seconds')

    def test_fractions(self) -> None:
        self.assertEqual(duration(0.25), '0.25 seconds')

    def test_one(self) -> None:
        self.assertEqual(duration(1), '1 second')

    def test_zero(self) -> None:
        self.assertEqual(duration(0), '0 seconds')


class ContentHashTest(TestCase):
    def test_known_digest(self) -> None:
        # sha256('') begins e3b0c44298fc...
        self.assertEqual(content_hash(''), 'e3b0c44298fc')

    def test_length(self) -> None:
        self.assertEqual(len(content_hash('variant = conv\n', length=20)), 20)
        self.assertNotEqual(content_hash('a'), content_hash('b'))


class SeedTest(TestCase):
    def test_streams_repeat(self) -> None:
        a = make_rng(3, 1, 2).random(4)
        b = make_rng(3, 1, 2).random(4)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self) -> None:
        draws = {
            tuple(make_rng(*keys).random(2))
            for keys in [(0,), (1,), (0, 1), (0, 2), (0, 1, 0)]
        }
        self.assertEqual(len(draws), 5)

    def test_derive_seed(self) -> None:
        self.assertEqual(derive_seed(7, 1), derive_seed(7, 1))
        self.assertNotEqual(derive_seed(7, 1), derive_seed(7, 2))
        self.assertNotEqual(derive_seed(7, 1), derive_seed(8, 1))
        self.assertGreaterEqual(derive_seed(7), 0)
        self.assertLess(derive_seed(7), 2**64)

    def test_large_and_negative_seeds(self) -> None:
        make_rng(2**70, -1).random()
        self.assertIsInstance(derive_seed(-5, 2**40), int)


class BinaryReaderTest(TestCase):
    def test_sequential(self) -> None:
        data = struct.pack('<I', 7) + np.array([1.5, -2.0], dtype='<f8').tobytes()
        reader = BinaryReader(data)
        self.assertEqual(reader.unpack('<I'), (7,))
        self.assertFalse(reader.exhausted)
        np.testing.assert_array_equal(reader.floats(2), [1.5, -2.0])
        self.assertTrue(reader.exhausted)

    def test_truncated(self) -> None:
        reader = BinaryReader(b'\0' * 12)
        with self.assertRaisesRegex(ValueError, 'unexpected end of file'):
            reader.floats(2)
        self.assertEqual(reader.offset, 0)

    def test_floats_writable(self) -> None:
        values = BinaryReader(np.zeros(3).tobytes()).floats(3)
        values[0] = 1.0
        self.assertEqual(values.dtype, np.float64)

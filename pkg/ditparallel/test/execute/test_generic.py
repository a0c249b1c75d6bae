import unittest

from ditparallel.exceptions import ChannelClosedError, NumericError, ProtocolError, ValidationError
from ditparallel.execute.channel import ACTIVATION, Message, Network
from ditparallel.execute.generic import Worker, KVRead, run_workers, check_divisible, check_steps, RUNNERS


class Sender(Worker):

    def __init__(self, device, network, target, timestep):
        super(Sender, self).__init__(device, network)
        self.target = target
        self.timestep = timestep

    def program(self):
        yield from self.send(self.target, Message(ACTIVATION, self.device, self.timestep, payload='h'))


class Receiver(Worker):

    def __init__(self, device, network, source, timestep):
        super(Receiver, self).__init__(device, network)
        self.source = source
        self.timestep = timestep
        self.received = None

    def program(self):
        self.received = yield from self.receive(self.source, ACTIVATION, self.timestep)


class Idle(Worker):

    def program(self):
        return iter(())


class Failing(Worker):

    def program(self):
        raise NumericError('non-finite activation')
        yield


class Network_TestCase(unittest.TestCase):

    def test_01_channels(self):
        network = Network(3, 2)
        channel = network.channel(0, 2)
        self.assertEqual(channel.name, '0->2')
        self.assertTrue(channel.try_put(Message(ACTIVATION, 0, 1)))
        self.assertTrue(channel.try_put(Message(ACTIVATION, 0, 0)))
        self.assertFalse(channel.try_put(Message(ACTIVATION, 0, 0)))
        self.assertEqual(network.pending(), {'0->2': 2})
        self.assertEqual(channel.get().timestep, 1)
        self.assertEqual(channel.try_get().timestep, 0)
        self.assertIsNone(channel.try_get())
        self.assertEqual(network.pending(), {})
        with self.assertRaises(ValidationError):
            network.channel(1, 1)

    def test_02_abort(self):
        network = Network(2, 1)
        network.abort()
        self.assertTrue(network.aborted)
        with self.assertRaises(ChannelClosedError):
            network.channel(0, 1).get()
        with self.assertRaises(ChannelClosedError):
            network.channel(1, 0).put(Message(ACTIVATION, 1, 0))

    def test_03_capacity(self):
        with self.assertRaises(ValidationError):
            Network(2, 0)


class Runners_TestCase(unittest.TestCase):

    def test_01_delivery(self):
        for runner in RUNNERS:
            network = Network(2, 1)
            receiver = Receiver(1, network, 0, 4)
            elapsed = run_workers([Sender(0, network, 1, 4), receiver], network, runner)
            self.assertGreaterEqual(elapsed, 0.0)
            self.assertEqual(receiver.received.payload, 'h')

    def test_02_unexpected_message(self):
        for runner in RUNNERS:
            network = Network(2, 1)
            with self.assertRaisesRegex(ProtocolError, 'expected'):
                run_workers([Sender(0, network, 1, 5), Receiver(1, network, 0, 4)], network, runner, timeout_s=10.0)

    def test_03_undelivered(self):
        for runner in RUNNERS:
            network = Network(2, 1)
            with self.assertRaisesRegex(ProtocolError, 'undelivered: 0->1=1'):
                run_workers([Sender(0, network, 1, 4), Idle(1, network)], network, runner)

    def test_04_deadlock(self):
        network = Network(2, 1)
        with self.assertRaisesRegex(ProtocolError, 'deadlock'):
            run_workers([Receiver(0, network, 1, 0), Receiver(1, network, 0, 0)], network, 'cooperative')
        network = Network(2, 1)
        with self.assertRaisesRegex(ProtocolError, 'still running'):
            run_workers([Receiver(0, network, 1, 0), Receiver(1, network, 0, 0)], network, 'threaded',
                        timeout_s=0.2)

    def test_05_worker_failure(self):
        for runner in RUNNERS:
            network = Network(2, 1)
            with self.assertRaises(NumericError):
                run_workers([Failing(0, network), Receiver(1, network, 0, 0)], network, runner, timeout_s=10.0)

    def test_06_unknown_runner(self):
        network = Network(2, 1)
        with self.assertRaisesRegex(ValidationError, 'runner'):
            run_workers([Idle(0, network), Idle(1, network)], network, 'mpi')


class Checks_TestCase(unittest.TestCase):

    def test_01_divisible(self):
        check_divisible('layers', 8, 4, 'workers')
        with self.assertRaisesRegex(ValidationError, r'layers \(8\) is not divisible by workers \(3\)'):
            check_divisible('layers', 8, 3, 'workers')
        with self.assertRaises(ValidationError):
            check_divisible('layers', 8, 0, 'workers')

    def test_02_steps(self):
        check_steps(4, 4)
        with self.assertRaises(ValidationError):
            check_steps(0, 0)
        with self.assertRaises(ValidationError):
            check_steps(4, 5)

    def test_03_read_fraction(self):
        self.assertEqual(KVRead(0, 3, 1, 'steady', 2, 4, 1).fraction, 0.5)

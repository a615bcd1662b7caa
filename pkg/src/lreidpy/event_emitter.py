# -*- coding: utf-8 -*-

# Derivative work of pyee (https://github.com/jfhbrook/pyee),
# Copyright (c) 2015 Joshua Holbrook, MIT license.

"""
``EventEmitterMixin`` lets training components publish progress to any number
of listeners (metric writers, diagnostic dumpers, progress logging) without
knowing about them.

Handlers are plain synchronous callables and run on the emitting thread, in
registration order.
"""

from collections import OrderedDict, defaultdict
from threading import RLock

from .core import LReIDError

__all__ = ["EventEmitterMixin", "EventEmitterException"]


class EventEmitterException(LReIDError):
    """Raised when an ``error`` event is emitted without listeners."""

    pass


class EventEmitterMixin(object):
    """Mixin to add event emitter features to a class.

    Besides the events of the concrete class, there are two *special* events:

    - ``new_listener``: fires whenever a new listener is registered. Listeners for
      this event do not fire upon their own creation.

    - ``error``: when emitted without any listener attached, the first argument is
      raised (or an :class:`EventEmitterException` if there is none).

      For example::

          @trainer.on('error')
          def on_error(exception):
              LOGGER.error('Training failed: %s', exception)
    """

    def __init__(self, *args, **kwargs):
        super(EventEmitterMixin, self).__init__(*args, **kwargs)
        self._events = defaultdict(OrderedDict)
        self._event_lock = RLock()

    def on(self, event, f=None):
        """Registers the function ``f`` to the event name ``event``.

        If ``f`` isn't provided, this method returns a decorator::

            @trainer.on('iteration')
            def log_losses(record):
                print(record)

        The handler is returned in both forms, so it can be passed to :meth:`off` later.
        """

        def _on(f):
            with self._event_lock:
                self._add_event_handler(event, f, f)
            return f

        if f is None:
            return _on
        return _on(f)

    def _add_event_handler(self, event, key, handler):
        # Fire 'new_listener' *before* adding the new listener
        self.emit("new_listener", event, key)
        self._events[event][key] = handler

    def emit(self, event, *args, **kwargs):
        """Emit ``event``, passing ``*args`` and ``**kwargs`` to each attached function.

        Returns:
            bool: ``True`` if any function was attached to ``event``, otherwise ``False``.
        """
        handled = False

        with self._event_lock:
            handlers = list(self._events[event].values())

        for handler in handlers:
            handler(*args, **kwargs)
            handled = True

        if not handled and event == "error":
            if args:
                raise args[0]
            raise EventEmitterException("Uncaught, unspecified 'error' event.")

        return handled

    def once(self, event, f=None):
        """The same as :meth:`on`, except that the listener is removed after being called once."""

        def _wrapper(f):
            def g(*args, **kwargs):
                self.off(event, f)
                return f(*args, **kwargs)

            with self._event_lock:
                self._add_event_handler(event, f, g)
            return f

        if f is None:
            return _wrapper
        return _wrapper(f)

    def off(self, event, f):
        """Removes the function ``f`` from ``event``."""
        with self._event_lock:
            self._events[event].pop(f)

    def remove_all_listeners(self, event=None):
        """Remove all listeners attached to ``event``, or to every event if ``event`` is ``None``."""
        with self._event_lock:
            if event is not None:
                self._events[event] = OrderedDict()
            else:
                self._events = defaultdict(OrderedDict)

    def listeners(self, event):
        """Returns a list of all listeners registered to ``event``."""
        with self._event_lock:
            return list(self._events[event].keys())

    def has_listeners(self, event):
        """Indicate whether anything listens to ``event``.

        Emitters use this to skip building payloads nobody consumes.
        """
        with self._event_lock:
            return len(self._events[event]) > 0

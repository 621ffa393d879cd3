"""Exception hierarchy shared across pilotgrid."""


class PilotGridError(Exception):
    """Base class for all pilotgrid errors."""


class IllegalTransition(PilotGridError):
    def __init__(self, from_state, to_state, task_id=None):
        self.from_state = from_state
        self.to_state = to_state
        self.task_id = task_id
        where = f" (task {task_id})" if task_id else ""
        super().__init__(f"illegal transition {from_state} -> {to_state}{where}")


class TimestampRegression(PilotGridError):
    pass


class NotNew(PilotGridError):
    pass


class DuplicateId(PilotGridError):
    pass


class UnknownId(PilotGridError):
    pass


class AmbiguousPrefix(PilotGridError):
    pass


class UnknownApplication(PilotGridError):
    pass


class DuplicateApp(PilotGridError):
    pass


class InvalidField(PilotGridError):
    pass


class CycleDetected(PilotGridError):
    pass


class ChildAlreadyStarted(PilotGridError):
    pass


class AlreadyTerminal(PilotGridError):
    pass


class BasenameCollision(PilotGridError):
    pass


class CorruptHistory(PilotGridError):
    pass


class MissingEnvironment(PilotGridError):
    pass


class UnknownTemplate(PilotGridError):
    pass


class UnboundPlaceholder(PilotGridError):
    pass


class SpawnFailure(PilotGridError):
    pass


class SubmitFailure(PilotGridError):
    pass


class StoreUnreachable(PilotGridError):
    pass


class AlreadyExists(PilotGridError):
    pass
